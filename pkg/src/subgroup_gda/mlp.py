"""Small fully connected network with hand-written backprop.

Used both by the outcome nuisance model and by the MLP subgroup surrogate.
Parameters live in one flat vector; ``W1, b1, W2, b2, ..., WL, bL`` in that
order, weight matrices stored row-major with shape (fan_in, fan_out).
"""

from __future__ import annotations

import numpy as np


class DenseNet:
    """ReLU network ``d -> h -> ... -> h -> out`` returning the raw output logit."""

    def __init__(self, sizes, theta=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")
        self._shapes = []
        for fi, fo in zip(self.sizes[:-1], self.sizes[1:]):
            self._shapes += [(fi, fo), (fo,)]
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)
        self.theta = np.zeros(self.n_params) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.theta.shape}")

    # -- parameter views -------------------------------------------------

    def tensors(self, theta=None):
        theta = self.theta if theta is None else theta
        out, k = [], 0
        for shp in self._shapes:
            size = int(np.prod(shp))
            out.append(theta[k:k + size].reshape(shp))
            k += size
        return out

    def weight_mask(self) -> np.ndarray:
        """True on weight-matrix entries, False on biases."""
        mask, k = np.zeros(self.n_params, dtype=bool), 0
        for shp in self._shapes:
            size = int(np.prod(shp))
            mask[k:k + size] = len(shp) == 2
            k += size
        return mask

    def init_params(self, rng) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        parts = []
        for fi, fo in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fi)
            parts.append(rng.uniform(-bound, bound, size=fi * fo))
            parts.append(rng.uniform(-bound, bound, size=fo))
        self.theta = np.concatenate(parts)

    # -- forward / backward ----------------------------------------------

    def forward(self, X, cache: bool = False):
        ts = self.tensors()
        h = np.asarray(X, dtype=float)
        acts = [h]
        n_layers = len(ts) // 2
        for li in range(n_layers):
            W, b = ts[2 * li], ts[2 * li + 1]
            z = h @ W + b
            if li < n_layers - 1:
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        out = h[:, 0] if h.shape[1] == 1 else h
        if cache:
            return out, acts
        return out

    def backward(self, acts, dout) -> np.ndarray:
        """Gradient of ``sum(dout * out)`` w.r.t. the flat parameters."""
        ts = self.tensors()
        n_layers = len(ts) // 2
        delta = np.asarray(dout, dtype=float)
        if delta.ndim == 1:
            delta = delta[:, None]
        grads = [None] * len(ts)
        for li in range(n_layers - 1, -1, -1):
            a_in = acts[li]
            grads[2 * li] = a_in.T @ delta
            grads[2 * li + 1] = delta.sum(axis=0)
            if li > 0:
                delta = (delta @ ts[2 * li].T) * (a_in > 0)
        return np.concatenate([g.ravel() for g in grads])


class Adam:
    """Plain Adam on a flat parameter vector."""

    def __init__(self, n_params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)
