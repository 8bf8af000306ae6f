"""Dynamical-systems toolkit: machine-encoding vector fields and planar basins.

Two halves share one integrator core:

* ``tm_core`` / ``smooth_kit`` / ``robust_map`` / ``ode_system`` compile a
  Turing machine into a robustly contracting map on R^3 and into smooth
  vector fields whose flow simulates it, with quantitative tracking and
  perturbation guarantees.
* ``planar_basin`` computes basins of attraction of sinks for structurally
  stable planar fields, with a brute-force oracle for validation.

``integrator`` holds the shared RK45 driver; ``cli`` exposes the command
line.  A compiled extension accelerates the kernels when available (see
``_backend``).
"""

__version__ = "0.1.0"

from ._backend import BACKEND, HAS_OPENMP

__all__ = ["BACKEND", "HAS_OPENMP", "__version__"]
