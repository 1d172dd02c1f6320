"""Constraint vector ``g(s) <= 0`` and its coefficients with respect to the soft scores.

Supported families:

* size:     ``c - mean(s)``
* overlap:  ``s_i * h_i`` for each row with ``h_i > 0``
* linear:   ``a + sum_i b_i s_i``
* ratio:    ``a + sum_i b_i s_i / sum_i s_i`` where the denominator is treated
  as a constant when differentiating.

Rows with ``h_i <= 0`` already satisfy their overlap constraint for every
``s_i in (0, 1)``, so they are pruned when the set is built and the
constraint count stays fixed for the whole run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError
from .pseudo import OverlapScores


@dataclass(frozen=True)
class LinearConstraint:
    a: float
    b: np.ndarray
    name: str = "linear"
    kind: str = field(default="linear", init=False)


@dataclass(frozen=True)
class RatioConstraint:
    a: float
    b: np.ndarray
    name: str = "ratio"
    kind: str = field(default="ratio", init=False)


Extra = LinearConstraint | RatioConstraint


def budget_constraint(cost, budget_fraction: float = 0.5, name: str = "budget") -> LinearConstraint:
    """``sum_i cost_i s_i <= budget_fraction * n``, divided through by ``n``."""
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    return LinearConstraint(-budget_fraction, cost / n, name)


def mean_limit_constraint(values, limit: float, name: str = "safety") -> RatioConstraint:
    """Selected-group mean of ``values`` at most ``limit``."""
    return RatioConstraint(-float(limit), np.asarray(values, dtype=float), name)


def proportion_band_constraints(indicator, target: float, tol: float, name: str = "fairness"):
    """``|selected mean of indicator - target| <= tol`` as an upper and a lower ratio constraint."""
    b = np.asarray(indicator, dtype=float)
    return [
        RatioConstraint(-(target + tol), b, f"{name}_upper"),
        RatioConstraint(target - tol, -b, f"{name}_lower"),
    ]


@dataclass(frozen=True)
class ConstraintSet:
    """Ordered constraints: size, then materialised overlap rows, then extras."""

    n: int
    size_c: float
    overlap_rows: np.ndarray
    overlap_h: np.ndarray
    extras: tuple = ()
    alpha: float = 0.0

    @property
    def n_overlap(self) -> int:
        return int(self.overlap_rows.shape[0])

    @property
    def m(self) -> int:
        return 1 + self.n_overlap + len(self.extras)

    @property
    def has_ratio(self) -> bool:
        return any(e.kind == "ratio" for e in self.extras)

    def names(self) -> list[str]:
        return (["size"] + [f"overlap[{int(i)}]" for i in self.overlap_rows]
                + [e.name for e in self.extras])

    def kinds(self) -> list[str]:
        return ["size"] + ["overlap"] * self.n_overlap + [e.kind for e in self.extras]

    def slices(self):
        k = 1 + self.n_overlap
        return slice(0, 1), slice(1, k), slice(k, self.m)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "size_c": self.size_c, "alpha": self.alpha,
            "overlap_rows": self.overlap_rows.tolist(), "overlap_h": self.overlap_h.tolist(),
            "extras": [{"kind": e.kind, "name": e.name, "a": e.a, "b": e.b.tolist()} for e in self.extras],
        }

    @classmethod
    def from_dict(cls, d) -> "ConstraintSet":
        extras = []
        for e in d["extras"]:
            ctor = LinearConstraint if e["kind"] == "linear" else RatioConstraint
            extras.append(ctor(float(e["a"]), np.asarray(e["b"], dtype=float), e["name"]))
        return cls(int(d["n"]), float(d["size_c"]), np.asarray(d["overlap_rows"], dtype=int),
                   np.asarray(d["overlap_h"], dtype=float), tuple(extras), float(d["alpha"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def build_constraint_set(size_c: float, h: OverlapScores | None, extra=(), n: int | None = None) -> ConstraintSet:
    if not 0.0 < size_c < 1.0:
        raise ParameterError(f"size constraint c must lie in (0, 1), got {size_c}")
    if h is None:
        if n is None:
            raise ParameterError("n is required when no overlap scores are given")
        rows, hv, alpha = np.zeros(0, dtype=int), np.zeros(0), 0.0
    else:
        n = h.h.shape[0] if n is None else n
        if h.h.shape[0] != n:
            raise ParameterError("overlap scores do not match n")
        rows = np.flatnonzero(h.h > 0)
        hv, alpha = h.h[rows].copy(), h.alpha
    extras = []
    for e in extra:
        b = np.asarray(e.b, dtype=float)
        if b.shape != (n,):
            raise ParameterError(f"constraint {e.name!r}: b must have length {n}")
        if e.kind == "linear" and abs(b.sum()) <= 0:
            raise ParameterError(
                f"constraint {e.name!r}: coefficients must not sum to zero "
                "(the feasibility bound needs |sum b| > 0)"
            )
        extras.append(e)
    return ConstraintSet(int(n), float(size_c), rows, hv, tuple(extras), float(alpha))


@dataclass
class GVector:
    """Residuals of every constraint plus what is needed to form their s-gradients."""

    values: np.ndarray
    cset: ConstraintSet
    denominator: float

    def coefficients(self, k: int) -> np.ndarray:
        """Dense ``d g_k / d s`` (length ``n``)."""
        cs = self.cset
        out = np.zeros(cs.n)
        size_sl, ov_sl, ex_sl = cs.slices()
        if k == 0:
            out[:] = -1.0 / cs.n
        elif k < ov_sl.stop:
            j = k - 1
            out[cs.overlap_rows[j]] = cs.overlap_h[j]
        else:
            e = cs.extras[k - ex_sl.start]
            out[:] = e.b if e.kind == "linear" else e.b / self.denominator
        return out

    def combine(self, mult) -> np.ndarray:
        """``sum_k mult_k * d g_k / d s`` without materialising the Jacobian."""
        cs = self.cset
        mult = np.asarray(mult, dtype=float)
        size_sl, ov_sl, ex_sl = cs.slices()
        u = np.full(cs.n, -mult[0] / cs.n)
        if cs.n_overlap:
            np.add.at(u, cs.overlap_rows, mult[ov_sl] * cs.overlap_h)
        for e, mk in zip(cs.extras, mult[ex_sl]):
            if mk != 0.0:
                u += mk * (e.b if e.kind == "linear" else e.b / self.denominator)
        return u


def eval_g(cset: ConstraintSet, s, frozen_denominator: float | None = None) -> GVector:
    s = np.asarray(s, dtype=float)
    if s.shape != (cset.n,):
        raise ParameterError(f"expected {cset.n} scores, got {s.shape}")
    denom = float(s.sum()) if frozen_denominator is None else float(frozen_denominator)
    if cset.has_ratio and not denom > 0:
        raise NumericalError("ratio constraint evaluated with a non-positive denominator")
    vals = np.empty(cset.m)
    vals[0] = cset.size_c - s.mean()
    if cset.n_overlap:
        vals[1:1 + cset.n_overlap] = s[cset.overlap_rows] * cset.overlap_h
    k = 1 + cset.n_overlap
    for j, e in enumerate(cset.extras):
        num = float(e.b @ s)
        vals[k + j] = e.a + (num if e.kind == "linear" else num / denom)
    return GVector(vals, cset, denom)
