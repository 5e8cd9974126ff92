"""Higher-order surface meshing of implicitly defined manifolds and
surface PDE solvers on the resulting meshes."""

__version__ = "0.1.0"
