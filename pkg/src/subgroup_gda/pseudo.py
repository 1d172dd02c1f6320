"""Per-sample pseudo-outcomes and the per-sample overlap score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import NumericalError, ParameterError
from .nuisance import NuisanceEstimates


@dataclass(frozen=True)
class PseudoOutcomes:
    phi: np.ndarray
    estimator: str

    @property
    def phi_max(self) -> float:
        return float(np.max(np.abs(self.phi)))

    def subset(self, idx) -> "PseudoOutcomes":
        return PseudoOutcomes(self.phi[idx], self.estimator)


def _check_finite(phi, est: NuisanceEstimates):
    bad = np.flatnonzero(~np.isfinite(phi))
    if bad.size:
        i = int(bad[0])
        raise NumericalError(
            f"non-finite pseudo-outcome at row {i} (e_hat={est.e_hat[i]!r}, "
            f"mu0={est.mu0_hat[i]!r}, mu1={est.mu1_hat[i]!r})",
            row=i,
        )


def aiptw_phi(est: NuisanceEstimates, ds: Dataset) -> PseudoOutcomes:
    """Doubly robust (augmented IPW) pseudo-outcome per row."""
    a = ds.treatment.astype(float)
    y = ds.outcome
    e, m0, m1 = est.e_hat, est.mu0_hat, est.mu1_hat
    with np.errstate(all="ignore"):
        phi = m1 - m0 + a / e * (y - m1) - (1 - a) / (1 - e) * (y - m0)
    _check_finite(phi, est)
    return PseudoOutcomes(phi, "aiptw")


def iptw_phi(est: NuisanceEstimates, ds: Dataset) -> PseudoOutcomes:
    a = ds.treatment.astype(float)
    y = ds.outcome
    e = est.e_hat
    with np.errstate(all="ignore"):
        phi = a / e * y - (1 - a) / (1 - e) * y
    _check_finite(phi, est)
    return PseudoOutcomes(phi, "iptw")


ESTIMATORS = {"aiptw": aiptw_phi, "iptw": iptw_phi}


@dataclass(frozen=True)
class OverlapScores:
    """``h <= 0`` exactly when the propensity lies in ``[alpha, 1 - alpha]``.

    ``alpha == 0`` disables the overlap constraint; every score is then ``-inf``.
    """

    h: np.ndarray
    alpha: float

    @property
    def disabled(self) -> bool:
        return self.alpha == 0.0


def overlap_h(e_hat, alpha: float) -> OverlapScores:
    if not 0.0 <= alpha < 0.5:
        raise ParameterError(f"alpha must lie in [0, 0.5), got {alpha}")
    e = np.asarray(e_hat, dtype=float)
    if alpha == 0.0:
        return OverlapScores(np.full(e.shape, -np.inf), 0.0)
    h = 1.0 - e * (1.0 - e) / (alpha * (1.0 - alpha))
    # rounding near the band edges can flip the sign; pin it to the interval test
    inside = (e >= alpha) & (e <= 1.0 - alpha)
    h = np.where(inside, np.minimum(h, 0.0), np.maximum(h, np.finfo(float).tiny))
    return OverlapScores(h, float(alpha))
