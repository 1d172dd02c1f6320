"""Constrained subgroup search by gradient descent-ascent.

The surrogate parameters ``theta`` descend and the multipliers ``lam`` ascend on

    L(theta, lam) = -f(theta) + lam . relu(g(theta)) - beta/2 |lam|^2 + l1 |theta_w|_1

where ``f`` is the soft-weighted mean pseudo-outcome and ``g`` the constraint
vector. The descent step is shrunk by ``gamma_t = (1 + t) ** zeta`` so the
multipliers move on a faster timescale than the model.

Setting ``objective="plain"`` drops the gate and the multiplier regulariser
(``-f + lam . g``); it is kept for stability comparisons only.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .constraints import ConstraintSet, GVector, eval_g
from .errors import CollapseError, NumericalError, ParameterError
from .surrogate import Surrogate, l1_penalty

log = logging.getLogger(__name__)

OBJECTIVES = ("modified", "plain")
BETA_BAND = (1e-5, 1e-2)
PROBE_ROWS = 256


@dataclass(frozen=True)
class GdaConfig:
    eta: float = 0.05
    zeta: float = 0.5
    beta: float = 1e-4
    l1_coef: float = 0.0
    t_max: int = 5000
    converge_window: int = 200
    converge_rel_tol: float = 1e-5
    # collapse threshold as a fraction of c; an explicit collapse_xi wins
    collapse_xi_frac: float = 0.05
    collapse_xi: float | None = None
    max_restarts: int = 3
    seed: int = 0
    objective: str = "modified"
    delta: float = 0.05
    allow_beta_outside_band: bool = False

    def validate(self) -> "GdaConfig":
        if self.eta <= 0 or self.zeta < 0:
            raise ParameterError("need eta > 0 and zeta >= 0")
        if self.objective not in OBJECTIVES:
            raise ParameterError(f"objective must be one of {OBJECTIVES}")
        if self.objective == "modified" and self.beta <= 0:
            raise ParameterError("beta must be positive")
        lo, hi = BETA_BAND
        if self.objective == "modified" and not lo <= self.beta <= hi:
            if not self.allow_beta_outside_band:
                raise ParameterError(
                    f"beta={self.beta:g} lies outside the recommended band [{lo:g}, {hi:g}]; "
                    "set allow_beta_outside_band to override"
                )
            log.warning("beta=%g outside the recommended band [%g, %g]", self.beta, lo, hi)
        if self.l1_coef < 0:
            raise ParameterError("l1_coef must be nonnegative")
        if self.t_max < 1 or self.converge_window < 1 or self.max_restarts < 0:
            raise ParameterError("t_max and converge_window must be positive, max_restarts >= 0")
        if not 0 < self.delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        return self

    def xi(self, size_c: float) -> float:
        xi = self.collapse_xi_frac * size_c if self.collapse_xi is None else self.collapse_xi
        if not 0 < xi < size_c:
            raise ParameterError(f"collapse threshold must lie in (0, c={size_c}), got {xi}")
        return float(xi)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GdaConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# objective pieces


def subgroup_functional(s, phi) -> tuple[float, np.ndarray]:
    """Soft-weighted mean of ``phi`` and its gradient with respect to ``s``."""
    s = np.asarray(s, dtype=float)
    phi = np.asarray(phi, dtype=float)
    total = float(s.sum())
    if not total > 0:
        raise CollapseError("soft group size is zero")
    f = float(s @ phi) / total
    return f, (phi - f) / total


def _relu(x):
    return np.where(x > 0, x, 0.0)


def penalty_terms(g_values, lam, beta: float, objective: str = "modified") -> float:
    g_values = np.asarray(g_values, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if objective == "plain":
        return float(lam @ g_values)
    return float(lam @ _relu(g_values)) - 0.5 * beta * float(lam @ lam)


def grad_lambda(lam, g_values, beta: float, objective: str = "modified") -> np.ndarray:
    """``relu(g) - beta * lam`` (or plain ``g`` for the unregularised objective)."""
    g_values = np.asarray(g_values, dtype=float)
    if objective == "plain":
        return g_values.copy()
    return _relu(g_values) - beta * np.asarray(lam, dtype=float)


def s_coefficients(w, gv: GVector, lam, objective: str = "modified") -> np.ndarray:
    """Descent direction in score space: ``-df/ds + sum_k lam_k gate_k dg_k/ds``."""
    lam = np.asarray(lam, dtype=float)
    mult = lam if objective == "plain" else lam * (gv.values > 0)
    return -w + gv.combine(mult)


@dataclass
class Evaluation:
    """Everything about one parameter vector that the updates need."""

    s: np.ndarray
    cache: object
    f: float
    w: np.ndarray
    g: GVector
    l1: float

    @property
    def size(self) -> float:
        return float(self.s.mean())


def evaluate(model: Surrogate, X, phi, cset: ConstraintSet, l1_coef: float = 0.0) -> Evaluation:
    s, cache = model.evaluate(X)
    f, w = subgroup_functional(s, phi)
    gv = eval_g(cset, s)
    l1 = l1_penalty(model, l1_coef)[0] if l1_coef else 0.0
    return Evaluation(s, cache, f, w, gv, l1)


def objective(model: Surrogate, X, phi, cset: ConstraintSet, lam, beta: float,
              l1_coef: float = 0.0, theta=None, variant: str = "modified",
              include_l1: bool = True) -> float:
    """Value of the min-max objective at ``theta`` (the model's own parameters if None)."""
    if theta is not None:
        model = model.clone()
        model.theta = theta
    ev = evaluate(model, X, phi, cset, l1_coef if include_l1 else 0.0)
    return -ev.f + penalty_terms(ev.g.values, lam, beta, variant) + ev.l1


def _theta_grad(model: Surrogate, ev: Evaluation, lam, l1_coef, variant) -> np.ndarray:
    u = s_coefficients(ev.w, ev.g, lam, variant)
    if not np.all(np.isfinite(u)):
        raise NumericalError("non-finite score-space coefficients")
    grad = model.grad_from_cache(ev.cache, u)
    if l1_coef:
        grad = grad + l1_penalty(model, l1_coef)[1]
    return grad


def grad_theta(model: Surrogate, X, phi, lam, cset: ConstraintSet, l1_coef: float = 0.0,
               variant: str = "modified") -> np.ndarray:
    ev = evaluate(model, X, phi, cset)
    return _theta_grad(model, ev, lam, l1_coef, variant)


# ---------------------------------------------------------------------------
# state and single step


@dataclass
class Traces:
    objective: list = field(default_factory=list)
    objective_no_l1: list = field(default_factory=list)
    f: list = field(default_factory=list)
    size: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    lam: list = field(default_factory=list)

    def append(self, ev: Evaluation, lam, beta, variant):
        base = -ev.f + penalty_terms(ev.g.values, lam, beta, variant)
        self.objective.append(base + ev.l1)
        self.objective_no_l1.append(base)
        self.f.append(ev.f)
        self.size.append(ev.size)
        self.residuals.append(ev.g.values.copy())
        self.lam.append(np.array(lam, dtype=float))

    def __len__(self):
        return len(self.f)

    def arrays(self) -> dict:
        return {k: np.asarray(v) for k, v in asdict(self).items()}


@dataclass
class GdaState:
    theta: np.ndarray
    lam: np.ndarray
    t: int = 0
    traces: Traces = field(default_factory=Traces)


def step_scale(t: int, zeta: float) -> float:
    return float((1.0 + t) ** zeta)


def gda_step(state: GdaState, config: GdaConfig, model: Surrogate, X, phi, cset: ConstraintSet,
             ev: Evaluation | None = None) -> tuple[GdaState, Evaluation]:
    """One descent step on theta (using the current multipliers), then one
    projected ascent step on the multipliers evaluated at the new theta.

    ``ev`` is the evaluation at ``state.theta`` when the caller already has it.
    Returns the new state and the evaluation at the new parameters.
    """
    variant = config.objective
    model.theta = state.theta
    if ev is None:
        ev = evaluate(model, X, phi, cset, config.l1_coef)
    grad = _theta_grad(model, ev, state.lam, config.l1_coef, variant)
    gamma = step_scale(state.t, config.zeta)
    with np.errstate(over="ignore", invalid="ignore"):
        theta = state.theta - (config.eta / gamma) * grad
    if not np.all(np.isfinite(theta)):
        raise NumericalError("non-finite parameter update", iteration=state.t)
    model.theta = theta
    ev_next = evaluate(model, X, phi, cset, config.l1_coef)
    lam = state.lam + config.eta * grad_lambda(state.lam, ev_next.g.values, config.beta, variant)
    lam = np.maximum(lam, 0.0)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("non-finite multiplier update", iteration=state.t)
    state.traces.append(ev_next, lam, config.beta, variant)
    return GdaState(theta, lam, state.t + 1, state.traces), ev_next


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class FeasibilityDiagnostics:
    phi_max: float
    lipschitz_est: float
    mu_delta_est: float
    coordinate: int
    xi: float
    size_c: float
    beta: float
    beta_bound: float
    n: int
    delta: float
    delta_note: str = ""

    @property
    def beta_ok(self) -> bool:
        return self.beta <= self.beta_bound

    def linear_bound(self, b_sum: float) -> float:
        """Residual tolerance for a linear constraint whose coefficients sum to ``b_sum``."""
        if self.mu_delta_est == 0 or b_sum == 0:
            return float("inf")
        spread = self.lipschitz_est / (abs(self.mu_delta_est) * np.sqrt(self.n))
        return self.xi / (abs(b_sum) * (1.0 + spread * np.sqrt(np.log(2.0 / self.delta))))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_ok"] = self.beta_ok
        return d


def feasibility_diagnostics(model: Surrogate, X, phi, config: GdaConfig, size_c: float,
                            probe_rows: int = PROBE_ROWS, seed: int = 0) -> FeasibilityDiagnostics:
    """Empirical Lipschitz constant and mean sensitivity of ``S`` per coordinate,
    and the largest multiplier regulariser for which the size constraint is
    guaranteed to end within ``xi`` unless the model collapses."""
    X = np.asarray(X, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n = X.shape[0]
    xi = config.xi(size_c)
    rows = np.arange(n)
    if n > probe_rows:
        rows = np.sort(np.random.default_rng(seed).choice(n, probe_rows, replace=False))
    J = model.per_sample_jacobian(X[rows])
    L_j = np.abs(J).max(axis=0)
    mu_j = J.mean(axis=0)
    ratio = np.divide(np.abs(mu_j), L_j, out=np.zeros_like(mu_j), where=L_j > 0)
    j = int(np.argmax(ratio))
    phi_max = float(np.max(np.abs(phi)))
    L, mu = float(L_j[j]), float(mu_j[j])
    if L > 0 and phi_max > 0:
        bound = xi * (size_c - xi) * abs(mu) / (2.0 * phi_max * L)
    else:
        bound = float("inf")
    diag = FeasibilityDiagnostics(
        phi_max, L, mu, j, xi, size_c, config.beta, bound, n, config.delta,
        f"linear-constraint tolerances hold with probability at least {1 - config.delta:g}",
    )
    if config.objective == "modified" and not diag.beta_ok:
        lo, hi = BETA_BAND
        log.warning("beta=%g exceeds the feasibility bound %.3g (recommended band [%g, %g])",
                    config.beta, bound, lo, hi)
    return diag


def constraint_tolerances(cset: ConstraintSet, diag: FeasibilityDiagnostics, denominator: float) -> np.ndarray:
    """Per-constraint residual tolerance: ``xi`` for size, the linear bound otherwise."""
    tol = np.empty(cset.m)
    tol[0] = diag.xi
    k = 1
    for h in cset.overlap_h:
        tol[k] = diag.linear_bound(float(h))
        k += 1
    for e in cset.extras:
        b_sum = float(e.b.sum())
        if e.kind == "ratio":
            b_sum /= denominator
        tol[k] = diag.linear_bound(b_sum)
        k += 1
    return tol


# ---------------------------------------------------------------------------
# full run


@dataclass
class TrainReport:
    model: Surrogate
    lam: np.ndarray
    residuals: np.ndarray
    tolerances: np.ndarray
    feasible_flags: np.ndarray
    constraint_names: list
    converged: bool
    collapsed: bool
    collapse_reason: str | None
    hit_t_max: bool
    restarts: int
    iterations: int
    final_f: float
    final_size: float
    final_objective: float
    diagnostics: FeasibilityDiagnostics | None
    restart_log: list
    traces: Traces

    @property
    def feasible(self) -> bool:
        """Size constraint met within tolerance and the model did not collapse."""
        return (not self.collapsed) and bool(self.feasible_flags[0])

    @property
    def all_feasible(self) -> bool:
        return (not self.collapsed) and bool(np.all(self.feasible_flags))

    @property
    def termination(self) -> str:
        if self.collapsed:
            return "collapsed" if self.collapse_reason == "collapse" else "infeasible"
        return "converged" if self.converged else "t_max"

    def summary(self) -> dict:
        return {
            "termination": self.termination,
            "converged": self.converged,
            "collapsed": self.collapsed,
            "collapse_reason": self.collapse_reason,
            "feasible": self.feasible,
            "all_feasible": self.all_feasible,
            "restarts": self.restarts,
            "iterations": self.iterations,
            "final_f": self.final_f,
            "final_size": self.final_size,
            "final_objective": self.final_objective,
            "restart_log": self.restart_log,
        }

    def to_dict(self, include_traces: bool = False) -> dict:
        d = self.summary()
        d.update({
            "model": self.model.to_dict(),
            "lambda": self.lam.tolist(),
            "residuals": self.residuals.tolist(),
            "tolerances": [t if np.isfinite(t) else None for t in self.tolerances.tolist()],
            "feasible_flags": [bool(x) for x in self.feasible_flags],
            "constraint_names": list(self.constraint_names),
            "diagnostics": None if self.diagnostics is None else _jsonable(self.diagnostics.to_dict()),
        })
        if include_traces:
            d["traces"] = {k: v.tolist() for k, v in self.traces.arrays().items()}
        return d


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


def _relative_change(new, old) -> float:
    scale = max(float(np.max(np.abs(old))), 1e-12)
    return float(np.max(np.abs(new - old))) / scale


def _attempt(model, X, phi, cset, config, xi):
    """Iterate until convergence, ``t_max`` or collapse; returns (state, ev, status)."""
    state = GdaState(model.theta.copy(), np.zeros(cset.m))
    ev = evaluate(model, X, phi, cset, config.l1_coef)
    prev_obj = -ev.f + penalty_terms(ev.g.values, state.lam, config.beta, config.objective) + ev.l1
    quiet = 0
    while state.t < config.t_max:
        old_theta = state.theta
        try:
            state, ev = gda_step(state, config, model, X, phi, cset, ev)
        except CollapseError:
            return state, None, "collapsed"
        except NumericalError as exc:
            exc.traces = state.traces
            raise
        if ev.size < xi:
            return state, ev, "collapsed"
        obj = state.traces.objective[-1]
        d_theta = _relative_change(state.theta, old_theta)
        d_obj = abs(obj - prev_obj) / max(abs(prev_obj), 1e-12)
        prev_obj = obj
        quiet = quiet + 1 if (d_theta < config.converge_rel_tol and d_obj < config.converge_rel_tol) else 0
        if quiet >= config.converge_window:
            return state, ev, "converged"
    return state, ev, "t_max"


def run(X, phi, cset: ConstraintSet, model_init: Surrogate, config: GdaConfig,
        diagnostics: bool = True) -> TrainReport:
    """Train ``model_init`` (left untouched) and return a report.

    A run that collapses, or ends with the size constraint violated by more
    than ``xi``, is restarted from a freshly initialised model with a seed
    derived from ``(config.seed, restart index)``.
    """
    config.validate()
    X = np.asarray(X, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if X.shape[0] != phi.shape[0] or X.shape[0] != cset.n:
        raise ParameterError("X, phi and the constraint set disagree on n")
    xi = config.xi(cset.size_c)
    model = model_init.clone()
    restart_log = []
    restarts = 0
    while True:
        state, ev, status = _attempt(model, X, phi, cset, config, xi)
        size_ok = ev is not None and ev.g.values[0] <= xi
        record = {"attempt": restarts, "status": status, "iterations": state.t,
                  "final_size": None if ev is None else ev.size}
        if status != "collapsed" and size_ok:
            restart_log.append(record)
            break
        record["reason"] = "collapse" if status == "collapsed" else "size constraint violated"
        restart_log.append(record)
        if restarts >= config.max_restarts:
            break
        restarts += 1
        log.info("restarting (%s) attempt %d", record["reason"], restarts)
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), restarts]))
        model = model_init.clone()
        model.init_params(rng, X)

    # exhausting the restart budget without a size-feasible attempt flags the
    # report as collapsed, whatever the last attempt's failure mode was
    collapsed = status == "collapsed" or not size_ok
    reason = record.get("reason") if collapsed else None
    model.theta = state.theta
    if ev is None:
        s = model.forward(X)
        gvals = eval_g(cset, s, frozen_denominator=max(float(s.sum()), 1e-300)).values
        denom, f, size = float(s.sum()), float("nan"), float(s.mean())
    else:
        gvals, denom, f, size = ev.g.values, ev.g.denominator, ev.f, ev.size
    diag = None
    if diagnostics and status != "collapsed":
        diag = feasibility_diagnostics(model, X, phi, config, cset.size_c, seed=config.seed)
    if diag is not None:
        tol = constraint_tolerances(cset, diag, denom)
    else:
        tol = np.full(cset.m, np.inf)
        tol[0] = xi
    flags = (gvals <= tol) & (not collapsed)
    objective_value = state.traces.objective[-1] if len(state.traces) else float("nan")
    return TrainReport(
        model=model, lam=state.lam, residuals=gvals, tolerances=tol, feasible_flags=flags,
        constraint_names=cset.names(), converged=status == "converged", collapsed=collapsed,
        collapse_reason=reason, hit_t_max=status == "t_max", restarts=restarts, iterations=state.t, final_f=f,
        final_size=size, final_objective=objective_value, diagnostics=diag,
        restart_log=restart_log, traces=state.traces,
    )


def write_trace_csv(traces: Traces, path, names=None) -> None:
    arr = traces.arrays()
    m = arr["residuals"].shape[1] if arr["residuals"].ndim == 2 else 0
    names = names or [f"g{k}" for k in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "objective_no_l1", "f", "group_size"]
                   + [f"residual:{n}" for n in names] + [f"lambda:{n}" for n in names])
        for t in range(len(traces)):
            w.writerow([t + 1] + [repr(float(arr[k][t])) for k in ("objective", "objective_no_l1", "f", "size")]
                       + [repr(float(v)) for v in arr["residuals"][t]]
                       + [repr(float(v)) for v in arr["lam"][t]])


def with_overrides(config: GdaConfig, **kw) -> GdaConfig:
    return replace(config, **kw)
