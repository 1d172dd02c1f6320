"""Nuisance models: logistic propensity, per-arm MLP outcome regressions, balance diagnostic."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import DiagnosticError, FitError, NumericalError, ParameterError
from .mlp import Adam, DenseNet
from .synth import logistic

log = logging.getLogger(__name__)

E_CLIP = 1e-3
SMD_THRESHOLD = 0.2


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


# ---------------------------------------------------------------------------
# propensity


@dataclass
class PropensityModel:
    weights: np.ndarray
    bias: float
    standardizer: Standardizer
    converged: bool = True
    n_iter: int = 0

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    def predict_raw(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ParameterError(f"propensity model expects {self.d} features")
        return logistic(self.standardizer(X) @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {"kind": "logistic", "weights": self.weights.tolist(), "bias": self.bias,
                "standardizer": self.standardizer.to_dict(),
                "converged": self.converged, "n_iter": self.n_iter}

    @classmethod
    def from_dict(cls, d) -> "PropensityModel":
        return cls(np.asarray(d["weights"], dtype=float), float(d["bias"]),
                   Standardizer.from_dict(d["standardizer"]), bool(d.get("converged", True)),
                   int(d.get("n_iter", 0)))


def propensity_loss_grad(w, b, Z, a, l2):
    """Mean negative log-likelihood plus ``l2/2 |w|^2`` and its gradient."""
    z = Z @ w + b
    # log(1 + exp(z)) - a z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - a * z) + 0.5 * l2 * (w @ w)
    r = logistic(z) - a
    gw = Z.T @ r / len(a) + l2 * w
    gb = r.mean()
    return loss, gw, gb


def fit_propensity(ds: Dataset, l2: float = 1e-4, max_iters: int = 20000, tol: float = 1e-6) -> PropensityModel:
    """L2-penalised logistic regression by full-batch gradient descent.

    Step size is ``1 / L`` with ``L`` the Lipschitz constant of the gradient on the
    standardised design, so the iteration is monotone.
    """
    if l2 < 0:
        raise ParameterError("l2 must be nonnegative")
    ds.require_both_arms()
    std = Standardizer.fit(ds.features)
    Z = std(ds.features)
    a = ds.treatment.astype(float)
    n, d = Z.shape
    Zb = np.hstack([Z, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(Zb.T @ Zb / n)[-1] + l2
    lr = 1.0 / lip
    w, b = np.zeros(d), 0.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        loss, gw, gb = propensity_loss_grad(w, b, Z, a, l2)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite propensity loss at iteration {it}", iteration=it)
        if max(np.max(np.abs(gw)), abs(gb)) < tol:
            converged = True
            break
        w = w - lr * gw
        b = b - lr * gb
    if not converged:
        log.info("propensity fit stopped at max_iters=%d before reaching tol=%g", max_iters, tol)
    return PropensityModel(w, float(b), std, converged, it)


# ---------------------------------------------------------------------------
# outcome


@dataclass
class OutcomeModel:
    """One network per arm sharing an architecture; ``link`` is identity or logistic."""

    nets: tuple[DenseNet, DenseNet]
    standardizer: Standardizer
    link: str = "identity"
    y_mean: float = 0.0
    y_scale: float = 1.0

    @property
    def d(self) -> int:
        return self.nets[0].sizes[0]

    @property
    def hidden_size(self) -> int:
        return self.nets[0].sizes[1]

    def predict(self, X, arm: int) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ParameterError(f"outcome model expects {self.d} features")
        z = self.nets[arm].forward(self.standardizer(X))
        if self.link == "logistic":
            return logistic(z)
        return self.y_mean + self.y_scale * z

    def to_dict(self) -> dict:
        return {"kind": "mlp_t_learner", "link": self.link, "sizes": list(self.nets[0].sizes),
                "theta0": self.nets[0].theta.tolist(), "theta1": self.nets[1].theta.tolist(),
                "standardizer": self.standardizer.to_dict(),
                "y_mean": self.y_mean, "y_scale": self.y_scale}

    @classmethod
    def from_dict(cls, d) -> "OutcomeModel":
        nets = (DenseNet(d["sizes"], d["theta0"]), DenseNet(d["sizes"], d["theta1"]))
        return cls(nets, Standardizer.from_dict(d["standardizer"]), d["link"],
                   float(d["y_mean"]), float(d["y_scale"]))


def outcome_loss_grad(net: DenseNet, Z, y, link: str):
    """Mean loss (squared error or cross-entropy) and its parameter gradient."""
    out, acts = net.forward(Z, cache=True)
    m = len(y)
    if link == "logistic":
        loss = np.mean(np.logaddexp(0.0, out) - y * out)
        dout = (logistic(out) - y) / m
    else:
        r = out - y
        loss = 0.5 * np.mean(r * r)
        dout = r / m
    return loss, net.backward(acts, dout)


def _is_binary(y) -> bool:
    u = np.unique(y)
    return u.size == 2 and bool(np.all(np.isin(u, (0.0, 1.0))))


def fit_outcome(ds: Dataset, hidden_size: int = 50, epochs: int = 150, lr: float = 1e-3,
                seed: int = 0, batch_size: int = 64, weight_decay: float = 1e-5,
                link: str | None = None) -> OutcomeModel:
    """Fit ``mu_0`` and ``mu_1`` as separate two-hidden-layer ReLU networks (Adam, mini-batches)."""
    ds.require_both_arms(min_per_arm=2)
    link = link or ("logistic" if _is_binary(ds.outcome) else "identity")
    std = Standardizer.fit(ds.features)
    Z = std(ds.features)
    y = ds.outcome
    if link == "identity":
        y_mean, y_scale = float(y.mean()), float(y.std()) or 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    seeds = np.random.SeedSequence(seed).spawn(2)
    nets = []
    for arm in (0, 1):
        rng = np.random.default_rng(seeds[arm])
        idx = np.flatnonzero(ds.treatment == arm)
        Za, ya = Z[idx], (y[idx] - y_mean) / y_scale
        net = DenseNet((ds.d, hidden_size, hidden_size, 1))
        net.init_params(rng)
        opt = Adam(net.n_params, lr=lr)
        wmask = net.weight_mask()
        bs = min(batch_size, len(idx))
        for ep in range(epochs):
            perm = rng.permutation(len(idx))
            for start in range(0, len(idx), bs):
                bi = perm[start:start + bs]
                loss, g = outcome_loss_grad(net, Za[bi], ya[bi], link)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite outcome loss (arm {arm}, epoch {ep})", iteration=ep)
                g = g + weight_decay * net.theta * wmask
                net.theta = opt.step(net.theta, g)
        nets.append(net)
    return OutcomeModel((nets[0], nets[1]), std, link, y_mean, y_scale)


# ---------------------------------------------------------------------------
# estimates


@dataclass
class NuisanceEstimates:
    e_hat: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    clip: float = E_CLIP

    def __post_init__(self):
        if not 0.0 < self.clip < 0.5:
            raise ParameterError("clip must lie in (0, 0.5)")
        self.e_hat = np.clip(np.asarray(self.e_hat, dtype=float), self.clip, 1.0 - self.clip)
        self.mu0_hat = np.asarray(self.mu0_hat, dtype=float)
        self.mu1_hat = np.asarray(self.mu1_hat, dtype=float)

    @property
    def n(self) -> int:
        return self.e_hat.shape[0]

    def subset(self, idx) -> "NuisanceEstimates":
        return NuisanceEstimates(self.e_hat[idx], self.mu0_hat[idx], self.mu1_hat[idx], self.clip)


def predict_nuisance(pm: PropensityModel, om: OutcomeModel | None, X, clip: float = E_CLIP) -> NuisanceEstimates:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != pm.d or (om is not None and X.shape[1] != om.d):
        raise ParameterError("feature dimension does not match the fitted nuisance models")
    e = pm.predict_raw(X)
    if om is None:
        mu0 = mu1 = np.zeros(X.shape[0])
    else:
        mu0, mu1 = om.predict(X, 0), om.predict(X, 1)
    return NuisanceEstimates(e, mu0, mu1, clip)


# ---------------------------------------------------------------------------
# balance


def _weighted_mean_var(X, w):
    sw = w.sum()
    m = (w[:, None] * X).sum(axis=0) / sw
    v = (w[:, None] * (X - m) ** 2).sum(axis=0) / sw
    return m, v


def smd(X, treatment, weights) -> np.ndarray:
    """Absolute standardised mean difference per column; 0 when both arms have zero variance."""
    X = np.asarray(X, dtype=float)
    a = np.asarray(treatment)
    w = np.asarray(weights, dtype=float)
    t, c = a == 1, a == 0
    if not t.any() or not c.any():
        raise DiagnosticError("standardised mean difference needs both arms")
    m1, v1 = _weighted_mean_var(X[t], w[t])
    m0, v0 = _weighted_mean_var(X[c], w[c])
    pooled = np.sqrt((v1 + v0) / 2.0)
    diff = np.abs(m1 - m0)
    out = np.zeros_like(diff)
    ok = pooled > 0
    out[ok] = diff[ok] / pooled[ok]
    return out


def iptw_weights(treatment, e_hat) -> np.ndarray:
    a = np.asarray(treatment, dtype=float)
    e = np.asarray(e_hat, dtype=float)
    return a / e + (1 - a) / (1 - e)


def count_unbalanced(ds: Dataset, est: NuisanceEstimates, selection=None,
                     threshold: float = SMD_THRESHOLD) -> tuple[int, np.ndarray]:
    """Number of covariates whose IPTW-weighted SMD exceeds ``threshold`` within the selection."""
    sel = np.ones(ds.n, dtype=bool) if selection is None else np.asarray(selection).astype(bool)
    a = ds.treatment[sel]
    if not (a == 1).any() or not (a == 0).any():
        raise DiagnosticError("selection is empty in at least one treatment arm")
    w = iptw_weights(a, est.e_hat[sel])
    s = smd(ds.features[sel], a, w)
    return int((s > threshold).sum()), s


# ---------------------------------------------------------------------------
# serialisation


def save_models(path, pm: PropensityModel, om: OutcomeModel | None) -> None:
    doc = {"propensity": pm.to_dict(), "outcome": None if om is None else om.to_dict()}
    Path(path).write_text(json.dumps(doc))


def load_models(path) -> tuple[PropensityModel, OutcomeModel | None]:
    doc = json.loads(Path(path).read_text())
    om = None if doc["outcome"] is None else OutcomeModel.from_dict(doc["outcome"])
    return PropensityModel.from_dict(doc["propensity"]), om
