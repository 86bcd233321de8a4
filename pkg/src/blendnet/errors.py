"""Exception types shared across the package.

Errors are grouped by the stage that raises them: input validation
(graph and config construction), matrix analysis, and time integration.
All inherit from :class:`BlendnetError` so callers can catch broadly.
"""

from __future__ import annotations


class BlendnetError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------------------
# graph construction and spectra


class InvalidEdge(BlendnetError):
    """Edge list entry is malformed, out of range, self-looped, or a
    duplicate with a conflicting weight."""


class DisconnectedGraph(BlendnetError):
    """The interaction graph is not connected; coupling analyses are
    meaningless on a disconnected graph."""


# ---------------------------------------------------------------------------
# matrix analysis


class NotSymmetric(BlendnetError):
    """A matrix required to be symmetric is not."""


class NotPsd(BlendnetError):
    """A matrix required to be positive semidefinite has a negative
    eigenvalue beyond tolerance."""


class NotObservable(BlendnetError):
    """The reduced pair handed to gain design is not observable."""


class NotDetectable(BlendnetError):
    """The stacked sensing pattern cannot reconstruct the plant state."""


class NontrivialCommonUndetectable(BlendnetError):
    """All agents share a blind subspace, so no amount of information
    exchange recovers the full state."""


class DimensionMismatch(BlendnetError):
    """Operands have incompatible shapes."""


class WeightNotPd(BlendnetError):
    """The inter-agent coupling weight matrix is not symmetric positive
    definite."""


class RankDeficientA(BlendnetError):
    """The stacked regressor matrix does not have full column rank, so the
    least-squares problem has no unique solution."""


class NotConvex(BlendnetError):
    """A cost function violates the strict convexity requirement."""


class Infeasible(BlendnetError):
    """Total demand cannot be met within the generation bounds."""


# ---------------------------------------------------------------------------
# integration

class FunnelViolationAtStart(BlendnetError):
    """An initial condition sits on or outside the funnel envelope."""


class StepUnderflow(BlendnetError):
    """The integrator step fell below the floor; the trajectory likely has
    a finite escape or unresolvable stiffness."""


class NonFiniteState(BlendnetError):
    """The state left the floating-point range (nan or inf)."""


class NonFiniteJacobian(BlendnetError):
    """A finite-difference Jacobian evaluation produced nan or inf."""


class NoBracket(BlendnetError):
    """A scalar root is not enclosed by the search interval."""


class NotMonotone(BlendnetError):
    """A map assumed strictly increasing was observed to decrease."""


# ---------------------------------------------------------------------------
# harness


class ConfigError(BlendnetError):
    """A scenario configuration is malformed or inconsistent."""


class IoError(BlendnetError):
    """An artifact could not be written."""
