"""Backend selection.

The compiled extension is preferred; set BASIN_FORGE_FORCE_PYTHON=1 to force
the pure-Python kernels (used by the parity tests and the benchmark).
BASIN_FORGE_THREADS caps the OpenMP thread count of the compiled drivers.
"""

import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("BASIN_FORGE_FORCE_PYTHON", "").strip() not in ("", "0"):
    from . import _pykernels as kernels
else:
    try:
        from . import _core as kernels  # type: ignore[no-redef]
    except ImportError:  # extension not built on this install
        from . import _pykernels as kernels  # type: ignore[no-redef]
        log.info("compiled kernels unavailable, using the Python backend")

BACKEND = kernels.BACKEND
HAS_OPENMP = kernels.HAS_OPENMP


def default_threads():
    """Thread count for grid drivers: BASIN_FORGE_THREADS or all cores."""
    raw = os.environ.get("BASIN_FORGE_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring malformed BASIN_FORGE_THREADS=%r", raw)
    return 0  # let OpenMP pick
