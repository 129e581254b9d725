"""Exception types shared across the package.

Every computational error carries a stable ``name`` used by the CLI for
machine-readable reporting and exit status.
"""
from __future__ import annotations


class LumpCoupleError(Exception):
    """Base class for computational errors."""

    @property
    def name(self) -> str:
        return type(self).__name__


class NotIrreducible(LumpCoupleError):
    """Kernel has more than one recurrent class."""


class TrajectoryBudgetExceeded(LumpCoupleError):
    """Trajectory enumeration grew past the configured cap."""

    def __init__(self, count: int, cap: int):
        super().__init__(f"trajectory budget exceeded: {count} > cap {cap}")
        self.count = count
        self.cap = cap


class NotStationary(LumpCoupleError):
    """A distribution claimed stationary fails pi P = pi."""


class NotConverged(LumpCoupleError):
    """Fixed-point iteration hit the iteration cap.

    Carries the last iterate and diagnostics so the caller may proceed
    at its own risk.
    """

    def __init__(self, message: str, phi=None, diagnostics=None):
        super().__init__(message)
        self.phi = phi
        self.diagnostics = diagnostics or {}


class PhiNotConverged(NotConverged):
    """Coupling construction refused because the eigenvector iteration did not converge."""


class HypothesisEvidenceFailed(LumpCoupleError):
    """Finite-horizon image comparison found a deviation, so the inputs
    do not share the claimed common image chain."""

    def __init__(self, side: str, deviation, horizon: int):
        super().__init__(
            f"image of {side} differs from the common chain by {deviation} "
            f"within horizon {horizon}"
        )
        self.side = side
        self.deviation = deviation
        self.horizon = horizon


class NormalizationFailed(LumpCoupleError):
    """Coupled initial law or kernel rows failed to normalize."""

    def __init__(self, what: str, defect):
        super().__init__(f"{what} failed to normalize, defect {defect}")
        self.what = what
        self.defect = defect


class AbsorptionMismatch(LumpCoupleError):
    """Quasistationary inputs have different absorption probabilities."""


class NotQuasistationary(LumpCoupleError):
    """A chain failed the quasistationarity checks."""


class NotIntertwined(LumpCoupleError):
    """Link kernel fails the intertwining identity."""

    def __init__(self, deviation):
        super().__init__(f"link kernel fails intertwining identity, max deviation {deviation}")
        self.deviation = deviation


class ShapeMismatch(LumpCoupleError):
    """Witness or map shapes do not match the kernel they are checked against."""
