"""Shared builders and finite-difference checks for the test suite."""

from __future__ import annotations

import numpy as np

from subgroup_gda.constraints import LinearConstraint, build_constraint_set
from subgroup_gda.gda import grad_lambda, grad_theta, objective
from subgroup_gda.pseudo import overlap_h
from subgroup_gda.surrogate import build_surrogate

FD_EPS = 1e-6


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_fd(fun, x, eps: float = FD_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        out[i] = (fun(xp) - fun(xm)) / (2 * eps)
    return out


def small_problem(seed: int, n: int = 30, d: int = 4, size_c: float = 0.6, alpha: float = 0.1):
    """Random features, pseudo-outcomes and a size+overlap+linear constraint set."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    phi = rng.standard_normal(n)
    e_hat = rng.uniform(0.02, 0.98, n)
    extra = [LinearConstraint(-0.3, rng.uniform(0, 2, n) / n, "lin")]
    cset = build_constraint_set(size_c, overlap_h(e_hat, alpha), extra)
    return X, phi, cset, rng


def surrogate_for(family: str, X, seed: int):
    return build_surrogate(family, X, seed, hidden_size=5, depth=2, n_trees=3, tau=0.5)


def random_state(family: str, seed: int, n: int = 30):
    """Surrogate with perturbed parameters and a positive multiplier vector."""
    X, phi, cset, rng = small_problem(seed, n)
    model = surrogate_for(family, X, seed)
    model.theta = model.theta + 0.3 * rng.standard_normal(model.n_params)
    lam = rng.uniform(0.1, 2.0, cset.m)
    return model, X, phi, cset, lam


def check_gradients(model, X, phi, cset, lam, beta: float, l1_coef: float = 0.0):
    """Relative errors of the analytic theta and lambda gradients against central differences."""
    theta0 = model.theta.copy()
    g_theta = grad_theta(model, X, phi, lam, cset, l1_coef)

    def obj_theta(th):
        return objective(model, X, phi, cset, lam, beta, l1_coef, theta=th)

    fd_theta = central_fd(obj_theta, theta0)
    model.theta = theta0
    ev_g = objective_residuals(model, X, phi, cset)
    g_lam = grad_lambda(lam, ev_g, beta)

    def obj_lam(lv):
        return objective(model, X, phi, cset, lv, beta, l1_coef)

    fd_lam = central_fd(obj_lam, lam)
    return rel_err(g_theta, fd_theta), rel_err(g_lam, fd_lam), ev_g


def objective_residuals(model, X, phi, cset):
    from subgroup_gda.gda import evaluate

    return evaluate(model, X, phi, cset).g.values
