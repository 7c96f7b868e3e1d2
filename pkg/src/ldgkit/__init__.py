"""ldgkit: high-order local discontinuous Galerkin PDE solver.

Symbolic model descriptions are compiled into batch kernels (with CSE and
forward-mode tangents), discretized in space by the LDG method on high-order
meshes, advanced in time by DIRK schemes, and solved implicitly with a
matrix-free Newton-GMRES method.
"""

__version__ = "0.1.0"
