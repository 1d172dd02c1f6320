"""Synthetic confounded-treatment data with known individual effects.

Covariates are equicorrelated Gaussians, treatment follows a logistic
propensity in the covariates, and potential outcomes share a nonlinear
baseline. Three effect variants are available:

* ``continuous``: effect linear in the covariates;
* ``binary_subgroup``: effect is a sum of step functions, which defines a
  ground-truth "responder" label;
* ``null``: no effect anywhere (for Type I error studies).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import ParameterError

VARIANTS = ("continuous", "binary_subgroup", "null")

DEFAULT_BETA1 = (0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0)
DEFAULT_BETA_TAU = (0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
DEFAULT_OMEGA_BASE = (0.0, -1.0, -1.0, 1.0, 1.0, -2.0, 0.0, 0.0, 0.0, 0.0)

# binary_subgroup variant: a coordinate "fires" above this value
STEP_THRESHOLD = 0.05


@dataclass(frozen=True)
class DgpConfig:
    p: int = 10
    sigma_x: float = 0.1
    sigma_y: float = 0.1
    rho: float = 0.3
    beta1: tuple[float, ...] = DEFAULT_BETA1
    beta_tau: tuple[float, ...] = DEFAULT_BETA_TAU
    omega_tilde: float = 5.0
    omega_base: tuple[float, ...] = DEFAULT_OMEGA_BASE
    n: int = 5000
    variant: str = "continuous"

    def __post_init__(self):
        for name in ("beta1", "beta_tau", "omega_base"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.variant == "null":
            object.__setattr__(self, "beta_tau", (0.0,) * len(self.beta_tau))

    @property
    def omega(self) -> np.ndarray:
        return self.omega_tilde * np.asarray(self.omega_base)

    def covariance(self) -> np.ndarray:
        return self.sigma_x ** 2 * ((1 - self.rho) * np.eye(self.p) + self.rho * np.ones((self.p, self.p)))

    def validate(self) -> "DgpConfig":
        if self.p < 1 or self.n < 1:
            raise ParameterError("p and n must be positive")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError(f"rho must lie in [0, 1) for a positive-definite covariance, got {self.rho}")
        if self.sigma_x <= 0 or self.sigma_y < 0 or self.omega_tilde < 0:
            raise ParameterError("need sigma_x > 0, sigma_y >= 0 and omega_tilde >= 0")
        for name in ("beta1", "beta_tau", "omega_base"):
            if len(getattr(self, name)) != self.p:
                raise ParameterError(f"{name} must have length p={self.p}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        return cls(**d)


def sample_covariates(cfg: DgpConfig, rng_seed) -> np.ndarray:
    cfg.validate()
    chol = np.linalg.cholesky(cfg.covariance())
    z = np.random.default_rng(rng_seed).standard_normal((cfg.n, cfg.p))
    return z @ chol.T


def logistic(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def assign_treatment(X, omega, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if X.ndim != 2 or omega.shape != (X.shape[1],):
        raise ParameterError(f"omega must have length {X.shape[1] if X.ndim == 2 else '?'}")
    e = logistic(X @ omega)
    a = (np.random.default_rng(rng_seed).random(X.shape[0]) < e).astype(np.int8)
    return a, e


def _baseline(X, beta1) -> np.ndarray:
    return (np.sin(10.0 * X) + 5.0 * X ** 2) @ np.asarray(beta1)


def true_effects(X, cfg: DgpConfig) -> np.ndarray:
    beta_tau = np.asarray(cfg.beta_tau)
    if cfg.variant == "binary_subgroup":
        return (X > STEP_THRESHOLD).astype(float) @ beta_tau
    if cfg.variant in ("continuous", "null"):
        return X @ beta_tau
    raise ParameterError(f"unknown variant {cfg.variant!r}")


def gen_outcomes(X, treatment, cfg: DgpConfig, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Observed outcome and the noiseless individual effect.

    One noise draw per row is shared by both potential outcomes, so the
    effect ``Y(1) - Y(0)`` carries no noise at all.
    """
    if cfg.variant not in VARIANTS:
        raise ParameterError(f"unknown variant {cfg.variant!r}; expected one of {VARIANTS}")
    X = np.asarray(X, dtype=float)
    a = np.asarray(treatment, dtype=float)
    eps = cfg.sigma_y * np.random.default_rng(rng_seed).standard_normal(X.shape[0])
    tau = true_effects(X, cfg)
    y0 = _baseline(X, cfg.beta1) + eps
    y1 = y0 + tau
    return a * y1 + (1 - a) * y0, tau


RISK_FORMS = ("affine", "shifted")


def attach_constraint_aux(X, feature_scale: float = 1.0,
                          risk_form: str = "affine") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Risk, treatment cost and a binary sensitive attribute per row.

    Formulas use 1-based covariate numbering (10th and 3rd columns) and are
    evaluated on ``X / feature_scale``; pass the covariate standard deviation
    to evaluate them on unit-scale covariates.

    ``risk_form`` picks how the risk logit is parenthesised:
    ``"affine"`` gives ``1 / (1 + exp(10 x + 1))``, ``"shifted"`` gives
    ``1 / (1 + exp(10 (x + 1)))``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 10:
        raise ParameterError("constraint auxiliaries need at least 10 covariates")
    if feature_scale <= 0:
        raise ParameterError("feature_scale must be positive")
    if risk_form not in RISK_FORMS:
        raise ParameterError(f"risk_form must be one of {RISK_FORMS}")
    Z = X / feature_scale
    x3, x10 = Z[:, 2], Z[:, 9]
    logit = 10.0 * x10 + 1.0 if risk_form == "affine" else 10.0 * (x10 + 1.0)
    risk = logistic(-logit)
    cost = (x3 + 5.0) / 5.0
    sens = (x3 > 0.5).astype(float)
    return risk, cost, sens


@dataclass(frozen=True)
class SyntheticData:
    dataset: Dataset
    propensity: np.ndarray
    config: DgpConfig
    seed: int
    meta: dict = field(default_factory=dict)


def generate(cfg: DgpConfig, seed: int, constraint_aux: bool = False,
             aux_feature_scale: float | None = None, risk_form: str = "affine") -> SyntheticData:
    """Draw a full dataset; sub-seeds are spawned from ``seed`` per stage."""
    cfg.validate()
    s_x, s_a, s_y = np.random.SeedSequence(seed).spawn(3)
    X = sample_covariates(cfg, s_x)
    a, e = assign_treatment(X, cfg.omega, s_a)
    y, tau = gen_outcomes(X, a, cfg, s_y)
    aux = {"true_ite": tau}
    if cfg.variant == "binary_subgroup":
        aux["true_label"] = (tau > 0).astype(float)
    if constraint_aux:
        scale = cfg.sigma_x if aux_feature_scale is None else aux_feature_scale
        aux["risk"], aux["cost"], aux["sensitive"] = attach_constraint_aux(X, scale, risk_form)
    return SyntheticData(Dataset(X, a, y, aux), e, cfg, seed)


def with_variant(cfg: DgpConfig, variant: str) -> DgpConfig:
    return replace(cfg, variant=variant)
