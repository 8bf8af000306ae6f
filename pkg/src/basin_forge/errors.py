"""Exception types shared across the toolkit.

Kept in one module so the CLI can map them onto exit codes without
importing every subsystem.
"""


class BasinForgeError(Exception):
    """Base class for all toolkit errors."""


# --- machine / encoding -----------------------------------------------------

class InvalidState(BasinForgeError):
    """Configuration state index outside 1..m."""


class MachineFormatError(BasinForgeError):
    """Malformed machine description (bad rule table, ranges, JSON shape)."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# --- smooth primitives ------------------------------------------------------

class DegenerateWindow(BasinForgeError):
    """zeta_ab window with a >= b."""


# --- robust map -------------------------------------------------------------

class BadLambda(BasinForgeError):
    """Contraction constant outside (0, 1)."""


class NewtonDiverged(BasinForgeError):
    """Newton iteration failed to reach tolerance within its budget."""


class NotASink(BasinForgeError):
    """Fixed point found but its linearization is not attracting."""


# --- ODE assembly -----------------------------------------------------------

class ZeroGateIntegral(BasinForgeError):
    """Gate function integrates to <= 0 over the targeting window."""


class BadStage(BasinForgeError):
    """Unknown field stage name."""


# --- integrator -------------------------------------------------------------

class IntegratorError(BasinForgeError):
    """Base class for integration failures."""


class StepUnderflow(IntegratorError):
    """Adaptive step fell below 1e-14 (stiffness or blow-up signal)."""


class RegionExit(IntegratorError):
    """State left the declared admissible box."""


class BudgetExceeded(BasinForgeError):
    """Perturbation bounds violate the experiment's admissible budget."""


# --- planar pipeline --------------------------------------------------------

class NonHyperbolicEquilibrium(BasinForgeError):
    """Equilibrium with an eigenvalue too close to the imaginary axis."""


class NewtonMiss(BasinForgeError):
    """Equilibrium search is inconsistent (seed grid too coarse)."""


class NoOrbitInHint(BasinForgeError):
    """Poincare return map has no fixed point inside the hinted annulus."""


class AmbiguousHint(BasinForgeError):
    """Hinted annulus brackets more than one periodic orbit."""


class SaddleConnectionSuspected(BasinForgeError):
    """Backward orbit of a saddle separatrix approaches another saddle."""


class IncompleteInventory(BasinForgeError):
    """Too many unclassifiable cells: a missing attractor or small T_max."""


class GridMismatch(BasinForgeError):
    """Rasters do not share grid geometry."""
