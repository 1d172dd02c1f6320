"""Differentiable soft subgroup-membership models ``S(x; theta) in (0, 1)``.

Every model exposes the same small surface the optimiser needs:

* ``theta`` -- flat parameter vector (fixed, documented ordering);
* ``forward(X)`` -> membership scores ``s``;
* ``backward_weighted(X, w)`` -> gradient of ``sum_i w_i s_i`` w.r.t. ``theta``;
* ``weight_mask()`` -> which entries of ``theta`` the L1 penalty applies to.

``evaluate``/``grad_from_cache`` are the cached variants used inside the
training loop so each iteration runs a single forward pass.
"""

from __future__ import annotations

import copy

import numpy as np

from .errors import NumericalError, ParameterError
from .mlp import DenseNet
from .nuisance import Standardizer
from .synth import logistic

S_EPS = 1e-6
_Z_MAX = float(np.log((1 - S_EPS) / S_EPS))


def _check_X(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != d:
        raise ParameterError(f"expected an (n, {d}) feature matrix, got shape {X.shape}")
    return X


def _squash(z):
    zc = np.clip(z, -_Z_MAX, _Z_MAX)
    s = logistic(zc)
    ds = s * (1.0 - s) * (np.abs(z) < _Z_MAX)
    return s, ds


class Surrogate:
    family = "base"

    d: int
    standardizer: Standardizer

    # subclasses implement: n_params, theta (attr), evaluate, grad_from_cache, weight_mask,
    # init_params, _hyper

    def forward(self, X) -> np.ndarray:
        return self.evaluate(X)[0]

    def backward_weighted(self, X, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if not np.all(np.isfinite(w)):
            raise NumericalError("non-finite weights passed to backward_weighted")
        _, cache = self.evaluate(X)
        return self.grad_from_cache(cache, w)

    def per_sample_jacobian(self, X) -> np.ndarray:
        """Rows of ``dS(x_i)/dtheta``; one backward pass per row."""
        X = _check_X(X, self.d)
        out = np.empty((X.shape[0], self.n_params))
        for i in range(X.shape[0]):
            out[i] = self.backward_weighted(X[i:i + 1], np.ones(1))
        return out

    def clone(self) -> "Surrogate":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {"family": self.family, "hyper": self._hyper(),
                "standardizer": self.standardizer.to_dict(), "theta": self.theta.tolist()}

    @staticmethod
    def from_dict(doc) -> "Surrogate":
        cls = {"mlp": MlpSurrogate, "tree": SoftTreeSurrogate, "forest": ForestSurrogate}[doc["family"]]
        model = cls(standardizer=Standardizer.from_dict(doc["standardizer"]), **doc["hyper"])
        model.theta = np.asarray(doc["theta"], dtype=float)
        return model


# ---------------------------------------------------------------------------
# MLP


class MlpSurrogate(Surrogate):
    """Two ReLU hidden layers and a logistic output, clamped to ``[1e-6, 1 - 1e-6]``.

    Parameter order: ``W1 (d x h), b1, W2 (h x h), b2, W3 (h x 1), b3``.
    """

    family = "mlp"

    def __init__(self, d: int, hidden_size: int = 50, standardizer: Standardizer | None = None):
        self.d = int(d)
        self.hidden_size = int(hidden_size)
        self.net = DenseNet((self.d, self.hidden_size, self.hidden_size, 1))
        self.standardizer = standardizer or Standardizer(np.zeros(self.d), np.ones(self.d))

    def _hyper(self):
        return {"d": self.d, "hidden_size": self.hidden_size}

    @property
    def n_params(self) -> int:
        return self.net.n_params

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    @theta.setter
    def theta(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} parameters")
        self.net.theta = value.copy()

    def init_params(self, rng, X=None) -> None:
        if X is not None:
            self.standardizer = Standardizer.fit(X)
        self.net.init_params(rng)

    def weight_mask(self) -> np.ndarray:
        return self.net.weight_mask()

    def evaluate(self, X):
        X = _check_X(X, self.d)
        z, acts = self.net.forward(self.standardizer(X), cache=True)
        s, ds = _squash(z)
        return s, (acts, ds)

    def grad_from_cache(self, cache, w) -> np.ndarray:
        acts, ds = cache
        return self.net.backward(acts, np.asarray(w, dtype=float) * ds)


# ---------------------------------------------------------------------------
# soft decision tree


class SoftTreeSurrogate(Surrogate):
    """Complete binary tree of depth ``D`` with soft, temperature-controlled routing.

    Internal node ``k`` (heap order, children ``2k+1`` left / ``2k+2`` right) mixes
    features with ``softmax(a_k)`` and routes right with probability
    ``logistic((x . softmax(a_k) - t_k) / tau)``. Leaf ``l`` contributes
    ``logistic(v_l)`` weighted by its path probability.

    Parameter order: feature logits ``a`` (n_internal x d, row-major), thresholds
    ``t`` (n_internal), leaf logits ``v`` (n_leaves). The L1 mask covers the leaf
    logits, the tree's only output weights.
    """

    family = "tree"

    def __init__(self, d: int, depth: int = 5, tau: float = 0.1, standardizer: Standardizer | None = None):
        if depth < 1:
            raise ParameterError("tree depth must be >= 1")
        if tau <= 0:
            raise ParameterError("routing temperature must be positive")
        self.d = int(d)
        self.depth = int(depth)
        self.tau = float(tau)
        self.n_internal = 2 ** self.depth - 1
        self.n_leaves = 2 ** self.depth
        self.standardizer = standardizer or Standardizer(np.zeros(self.d), np.ones(self.d))
        self._theta = np.zeros(self.n_params)

    def _hyper(self):
        return {"d": self.d, "depth": self.depth, "tau": self.tau}

    @property
    def n_params(self) -> int:
        return self.n_internal * self.d + self.n_internal + self.n_leaves

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @theta.setter
    def theta(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} parameters")
        self._theta = value.copy()

    def unpack(self, theta=None):
        theta = self._theta if theta is None else theta
        k, d = self.n_internal, self.d
        A = theta[: k * d].reshape(k, d)
        t = theta[k * d: k * d + k]
        v = theta[k * d + k:]
        return A, t, v

    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_params, dtype=bool)
        mask[self.n_internal * (self.d + 1):] = True
        return mask

    def init_params(self, rng, X=None, peak: float = 3.0) -> None:
        """Each node starts focused on one random feature with a threshold at a
        random training quantile of its mixed feature; leaves start at 0 (s = 0.5)."""
        if X is not None:
            self.standardizer = Standardizer.fit(X)
        A = rng.normal(0.0, 0.5, size=(self.n_internal, self.d))
        A[np.arange(self.n_internal), rng.integers(0, self.d, self.n_internal)] += peak
        levels = rng.uniform(0.25, 0.75, size=self.n_internal)
        if X is not None:
            F = self.standardizer(X) @ _softmax(A).T
            t = np.array([np.quantile(F[:, k], levels[k]) for k in range(self.n_internal)])
        else:
            t = rng.normal(0.0, 0.5, size=self.n_internal)
        self._theta = np.concatenate([A.ravel(), t, np.zeros(self.n_leaves)])

    def evaluate(self, X):
        X = _check_X(X, self.d)
        Z = self.standardizer(X)
        A, t, v = self.unpack()
        W = _softmax(A)
        F = Z @ W.T
        z = (F - t) / self.tau
        p = logistic(z)
        n = Z.shape[0]
        K, L = self.n_internal, self.n_leaves
        # reach probability for every node (internal then leaves, heap order)
        mu = np.empty((n, K + L))
        mu[:, 0] = 1.0
        for k in range(K):
            mu[:, 2 * k + 1] = mu[:, k] * (1.0 - p[:, k])
            mu[:, 2 * k + 2] = mu[:, k] * p[:, k]
        leaf_s, leaf_ds = _squash(v)
        # expected output conditional on reaching each node
        V = np.empty((n, K + L))
        V[:, K:] = leaf_s
        for k in range(K - 1, -1, -1):
            V[:, k] = p[:, k] * V[:, 2 * k + 2] + (1.0 - p[:, k]) * V[:, 2 * k + 1]
        s = V[:, 0]
        return s, (Z, W, p, mu, V, leaf_ds)

    def grad_from_cache(self, cache, w) -> np.ndarray:
        Z, W, p, mu, V, leaf_ds = cache
        u = np.asarray(w, dtype=float)
        K = self.n_internal
        left = V[:, 1:2 * K:2]
        right = V[:, 2:2 * K + 1:2]
        dp = u[:, None] * mu[:, :K] * (right - left)
        dz = dp * p * (1.0 - p)
        dF = dz / self.tau
        dt = -dF.sum(axis=0)
        dW = dF.T @ Z
        dA = W * (dW - (W * dW).sum(axis=1, keepdims=True))
        dv = (u @ mu[:, K:]) * leaf_ds
        return np.concatenate([dA.ravel(), dt, dv])

    def hard_forward(self, X) -> np.ndarray:
        """Deterministic routing: argmax feature per node, step at the threshold."""
        X = _check_X(X, self.d)
        Z = self.standardizer(X)
        A, t, v = self.unpack()
        feat = np.argmax(A, axis=1)
        node = np.zeros(Z.shape[0], dtype=int)
        rows = np.arange(Z.shape[0])
        for _ in range(self.depth):
            go_right = Z[rows, feat[node]] > t[node]
            node = 2 * node + 1 + go_right
        return _squash(v[node - self.n_internal])[0]


def _softmax(A):
    e = np.exp(A - A.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# forest


class ForestSurrogate(Surrogate):
    """Mean of several soft trees; parameters are the trees' vectors concatenated."""

    family = "forest"

    def __init__(self, d: int, n_trees: int = 3, depth: int = 5, tau: float = 0.1,
                 standardizer: Standardizer | None = None):
        if n_trees < 1:
            raise ParameterError("a forest needs at least one tree")
        self.d = int(d)
        self.standardizer = standardizer or Standardizer(np.zeros(self.d), np.ones(self.d))
        self.trees = [SoftTreeSurrogate(d, depth, tau, self.standardizer) for _ in range(n_trees)]

    def _hyper(self):
        t0 = self.trees[0]
        return {"d": self.d, "n_trees": len(self.trees), "depth": t0.depth, "tau": t0.tau}

    @property
    def n_params(self) -> int:
        return sum(t.n_params for t in self.trees)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([t.theta for t in self.trees])

    @theta.setter
    def theta(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} parameters")
        k = 0
        for t in self.trees:
            t.theta = value[k:k + t.n_params]
            k += t.n_params

    def weight_mask(self) -> np.ndarray:
        return np.concatenate([t.weight_mask() for t in self.trees])

    def init_params(self, rng, X=None) -> None:
        if X is not None:
            self.standardizer = Standardizer.fit(X)
        for t in self.trees:
            t.standardizer = self.standardizer
            t.init_params(rng, X)

    def evaluate(self, X):
        outs = [t.evaluate(X) for t in self.trees]
        s = np.mean([o[0] for o in outs], axis=0)
        return s, [o[1] for o in outs]

    def grad_from_cache(self, cache, w) -> np.ndarray:
        w = np.asarray(w, dtype=float) / len(self.trees)
        return np.concatenate([t.grad_from_cache(c, w) for t, c in zip(self.trees, cache)])

    def hard_forward(self, X) -> np.ndarray:
        return np.mean([t.hard_forward(X) for t in self.trees], axis=0)


# ---------------------------------------------------------------------------


FAMILIES = ("mlp", "tree", "forest")


def build_surrogate(family: str, X_train, seed, hidden_size: int = 50, depth: int = 5,
                    n_trees: int = 3, tau: float = 0.1) -> Surrogate:
    X_train = np.asarray(X_train, dtype=float)
    d = X_train.shape[1]
    if family == "mlp":
        model = MlpSurrogate(d, hidden_size)
    elif family == "tree":
        model = SoftTreeSurrogate(d, depth, tau)
    elif family == "forest":
        model = ForestSurrogate(d, n_trees, depth, tau)
    else:
        raise ParameterError(f"unknown surrogate family {family!r}; expected one of {FAMILIES}")
    model.init_params(np.random.default_rng(seed), X_train)
    return model


def predict_scores(model: Surrogate, X, hard_routing: bool = True) -> np.ndarray:
    """Scores used for deployment: trees route deterministically, the MLP is unchanged."""
    if hard_routing and hasattr(model, "hard_forward"):
        return model.hard_forward(X)
    return model.forward(X)


def harden(s, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ParameterError("threshold must lie in (0, 1)")
    return (np.asarray(s, dtype=float) > threshold).astype(np.int8)


def l1_penalty(model: Surrogate, coef: float) -> tuple[float, np.ndarray]:
    """``coef * sum|theta|`` over the model's weight entries, with subgradient 0 at 0."""
    if coef < 0:
        raise ParameterError("l1 coefficient must be nonnegative")
    mask = model.weight_mask()
    th = model.theta
    value = coef * float(np.abs(th[mask]).sum())
    grad = coef * np.sign(th) * mask
    return value, grad
