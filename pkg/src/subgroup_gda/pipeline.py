"""End-to-end runs: data, nuisance fits, pseudo-outcomes, constraints, training, metrics.

Every unit of work (an experiment split or a null-study instance) derives
its own seed from ``(master seed, unit index)`` so results do not depend on
how units are scheduled across workers.
"""

from __future__ import annotations

import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .config import RunConfig
from .constraints import (ConstraintSet, LinearConstraint, RatioConstraint, budget_constraint,
                          build_constraint_set, mean_limit_constraint, proportion_band_constraints)
from .data import Dataset, load_csv, split_indices
from .errors import ParameterError, StudyError, SubgroupError
from .evaluation import SubgroupMetrics, cross_validate, null_test, subgroup_metrics
from .gda import GdaConfig, TrainReport, run
from .nuisance import NuisanceEstimates, OutcomeModel, PropensityModel, fit_outcome, fit_propensity, predict_nuisance
from .pseudo import ESTIMATORS, overlap_h
from .surrogate import Surrogate, build_surrogate, harden, predict_scores
from .synth import generate

log = logging.getLogger(__name__)


def derive_seed(master: int, *index: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# building blocks


def load_data(cfg: RunConfig, seed: int) -> Dataset:
    d = cfg.data
    if d.source == "csv":
        return load_csv(d.csv_path, d.schema, d.delimiter)
    return generate(d.dgp_config(), seed, constraint_aux=d.constraint_aux,
                    aux_feature_scale=d.aux_feature_scale, risk_form=d.risk_form).dataset


def fit_nuisance_models(ds: Dataset, cfg: RunConfig, seed: int) -> tuple[PropensityModel, OutcomeModel | None]:
    s = cfg.nuisance
    pm = fit_propensity(ds, l2=s.l2, max_iters=s.max_iters, tol=s.tol)
    om = None
    if s.estimator == "aiptw":
        om = fit_outcome(ds, hidden_size=s.hidden_size, epochs=s.epochs, lr=s.lr, seed=seed,
                         batch_size=s.batch_size)
    return pm, om


def nuisance_and_phi(pm, om, ds: Dataset, cfg: RunConfig) -> tuple[NuisanceEstimates, np.ndarray]:
    est = predict_nuisance(pm, om, ds.features, clip=cfg.nuisance.clip)
    return est, ESTIMATORS[cfg.nuisance.estimator](est, ds).phi


def extra_constraints(ds: Dataset, cfg: RunConfig) -> list:
    out = []
    for e in cfg.constraints.extra:
        if e.column not in ds.aux:
            raise ParameterError(f"constraint {e.type!r} needs aux column {e.column!r}, not present in the data")
        col = ds.aux[e.column]
        name = e.name or e.type
        if e.type == "safety":
            out.append(mean_limit_constraint(col, e.limit, name))
        elif e.type == "budget":
            out.append(budget_constraint(col, e.limit, name))
        elif e.type == "fairness":
            out.extend(proportion_band_constraints(col, e.target, e.tol, name))
        elif e.type == "linear":
            out.append(LinearConstraint(float(e.a), e.direction * col, name))
        else:
            out.append(RatioConstraint(float(e.a), e.direction * col, name))
    return out


def constraint_set(ds: Dataset, est: NuisanceEstimates, cfg: RunConfig, size_c: float, alpha: float) -> ConstraintSet:
    return build_constraint_set(size_c, overlap_h(est.e_hat, alpha), extra_constraints(ds, cfg))


def make_surrogate(X, cfg: RunConfig, seed: int, hidden_size=None, depth=None) -> Surrogate:
    s = cfg.surrogate
    return build_surrogate(s.family, X, seed, hidden_size=hidden_size or s.hidden_size,
                           depth=depth or s.depth, n_trees=s.n_trees, tau=s.tau)


def select(model: Surrogate, X, cfg: RunConfig) -> np.ndarray:
    scores = predict_scores(model, X, hard_routing=cfg.surrogate.hard_routing)
    return harden(scores, cfg.surrogate.threshold).astype(bool)


def train(ds: Dataset, est: NuisanceEstimates, phi, cfg: RunConfig, seed: int, size_c: float,
          alpha: float, beta=None, hidden_size=None, depth=None) -> tuple[TrainReport, ConstraintSet]:
    cset = constraint_set(ds, est, cfg, size_c, alpha)
    gcfg = replace(cfg.gda, seed=seed, **({} if beta is None else {"beta": beta}))
    model = make_surrogate(ds.features, cfg, seed, hidden_size, depth)
    return run(ds.features, phi, cset, model, gcfg), cset


def train_on_rows(ds: Dataset, est: NuisanceEstimates, phi, train_rows, eval_rows, cfg: RunConfig,
                  seed: int, size_c: float, alpha: float | None = None, **params):
    """Train on ``train_rows`` and return the report and the hard mask on ``eval_rows``."""
    alpha = cfg.constraints.alpha if alpha is None else alpha
    sub = ds.subset(train_rows)
    report, _ = train(sub, est.subset(train_rows), np.asarray(phi)[train_rows], cfg, seed, size_c, alpha, **params)
    return report, select(report.model, ds.features[eval_rows], cfg)


# ---------------------------------------------------------------------------
# one split


@dataclass
class SplitBundle:
    """Everything produced for one train/test split before training."""

    seed: int
    ds_train: Dataset
    ds_test: Dataset
    propensity: PropensityModel
    outcome: OutcomeModel | None
    est_train: NuisanceEstimates
    phi_train: np.ndarray
    est_test: NuisanceEstimates
    phi_test: np.ndarray


def prepare_split(cfg: RunConfig, unit: int, data: Dataset | None = None,
                  test_fraction: float | None = None) -> SplitBundle:
    seed = derive_seed(cfg.experiment.seed, unit)
    if data is None:
        data = load_data(cfg, seed)
    frac = cfg.experiment.test_fraction if test_fraction is None else test_fraction
    split = split_indices(data.n, frac, seed)
    tr, te = data.subset(split.train), data.subset(split.test)
    tr.require_both_arms()
    pm, om = fit_nuisance_models(tr, cfg, seed)
    est_tr, phi_tr = nuisance_and_phi(pm, om, tr, cfg)
    est_te, phi_te = nuisance_and_phi(pm, om, te, cfg)
    return SplitBundle(seed, tr, te, pm, om, est_tr, phi_tr, est_te, phi_te)


@dataclass
class FitResult:
    bundle: SplitBundle
    size_c: float
    alpha: float
    params: dict
    report: TrainReport
    cset: ConstraintSet
    train_metrics: SubgroupMetrics
    test_metrics: SubgroupMetrics
    seconds: float
    cv_cells: list = field(default_factory=list)

    def record(self) -> dict:
        rec = {"seed": self.bundle.seed, "c": self.size_c, "alpha": self.alpha,
               "params": dict(self.params),
               "n_overlap_constraints": self.cset.n_overlap}
        rec.update({f"report_{k}": v for k, v in self.report.summary().items() if k != "restart_log"})
        rec.update(self.train_metrics.flat("train_"))
        rec.update(self.test_metrics.flat("test_"))
        return rec


def fit_cell(cfg: RunConfig, bundle: SplitBundle, size_c: float, alpha: float) -> FitResult:
    t0 = time.perf_counter()
    exp = cfg.experiment
    params, cells = cross_validate(bundle.ds_train, bundle.est_train, bundle.phi_train, exp.cv_grid,
                                   exp.cv_folds, bundle.seed, cfg, size_c=size_c, alpha=alpha)
    report, cset = train(bundle.ds_train, bundle.est_train, bundle.phi_train, cfg, bundle.seed,
                         size_c, alpha, **params)
    ref_alpha = alpha if alpha > 0 else exp.overlap_reference_alpha
    m_tr = select(report.model, bundle.ds_train.features, cfg)
    m_te = select(report.model, bundle.ds_test.features, cfg)
    tm = subgroup_metrics(bundle.ds_train, bundle.est_train, bundle.phi_train, m_tr, ref_alpha)
    sm = subgroup_metrics(bundle.ds_test, bundle.est_test, bundle.phi_test, m_te, ref_alpha)
    return FitResult(bundle, size_c, alpha, params, report, cset, tm, sm,
                     time.perf_counter() - t0, cells)


def _cells(cfg: RunConfig) -> list[tuple[float, float]]:
    cs = cfg.experiment.c_values or [cfg.constraints.size_c]
    alphas = cfg.experiment.alpha_values or [cfg.constraints.alpha]
    return [(c, a) for c in cs for a in alphas]


def run_unit(cfg: RunConfig, unit: int, data: Dataset | None = None) -> list[dict]:
    """One split: nuisances once, then one trained model per (c, alpha) cell."""
    try:
        bundle = prepare_split(cfg, unit, data)
    except SubgroupError as exc:
        return [{"unit": unit, "c": c, "alpha": a, "error": f"{type(exc).__name__}: {exc}"}
                for c, a in _cells(cfg)]
    out = []
    for c, a in _cells(cfg):
        try:
            rec = fit_cell(cfg, bundle, c, a).record()
        except SubgroupError as exc:
            rec = {"seed": bundle.seed, "c": c, "alpha": a, "error": f"{type(exc).__name__}: {exc}"}
        rec["unit"] = unit
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# experiments


def _map_units(fn, cfg: RunConfig, units, *args):
    workers = min(cfg.experiment.workers(), len(units))
    if workers <= 1:
        return [fn(cfg, u, *args) for u in units]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(units), units, *([a] * len(units) for a in args)))


def _numeric(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def aggregate(records: list[dict]) -> list[dict]:
    """Mean and standard error per (c, alpha, metric) over successful records."""
    groups: dict = {}
    for r in records:
        if "error" in r:
            continue
        groups.setdefault((r["c"], r["alpha"]), []).append(r)
    rows = []
    for (c, a), recs in sorted(groups.items()):
        keys = sorted({k for r in recs for k, v in r.items() if _numeric(v) or isinstance(v, bool)}
                      - {"c", "alpha", "unit", "seed"})
        for k in keys:
            vals = np.array([float(r[k]) for r in recs if r.get(k) is not None
                             and (_numeric(r[k]) or isinstance(r[k], bool))])
            if vals.size == 0:
                continue
            se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            rows.append({"c": c, "alpha": a, "metric": k, "mean": float(vals.mean()),
                         "se": se, "count": int(vals.size)})
    return rows


def versions() -> dict:
    return {"package": __version__, "numpy": np.__version__, "python": platform.python_version()}


@dataclass
class ExperimentReport:
    records: list
    aggregates: list
    config: dict
    versions: dict
    wall_clock: float

    def to_dict(self) -> dict:
        return {"records": self.records, "aggregates": self.aggregates, "config": self.config,
                "versions": self.versions, "wall_clock": self.wall_clock}

    def mean(self, metric: str, c: float | None = None, alpha: float | None = None) -> float:
        for row in self.aggregates:
            if row["metric"] == metric and (c is None or row["c"] == c) and (alpha is None or row["alpha"] == alpha):
                return row["mean"]
        raise KeyError(metric)

    def check_consistency(self, tol: float = 1e-12) -> bool:
        fresh = {(r["c"], r["alpha"], r["metric"]): r for r in aggregate(self.records)}
        for row in self.aggregates:
            other = fresh.get((row["c"], row["alpha"], row["metric"]))
            if other is None or abs(other["mean"] - row["mean"]) > tol or abs(other["se"] - row["se"]) > tol:
                return False
        return len(fresh) == len(self.aggregates)

    @classmethod
    def from_dict(cls, d) -> "ExperimentReport":
        rep = cls(d["records"], d["aggregates"], d["config"], d["versions"], d["wall_clock"])
        if not rep.check_consistency():
            raise StudyError("stored aggregates do not match the per-split records")
        return rep


def run_experiment(cfg: RunConfig) -> ExperimentReport:
    t0 = time.perf_counter()
    exp = cfg.experiment
    shared = None
    if cfg.data.source == "csv" or not exp.resample_data:
        shared = load_data(cfg, exp.seed)
    units = list(range(exp.splits))
    nested = _map_units(run_unit, cfg, units, shared) if shared is not None else _map_units(run_unit, cfg, units)
    records = [r for recs in nested for r in recs]
    if all("error" in r for r in records):
        raise StudyError("every split failed: " + records[0]["error"])
    return ExperimentReport(records, aggregate(records), cfg.to_dict(), versions(),
                            time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# null study


def typei_instance(cfg: RunConfig, index: int, c_values, iters: int, significance: float,
                   test_fraction: float, seed_base: int = 0) -> list[dict]:
    """Fit on one half, select and test on the other, for each ``c``."""
    cfg = replace(cfg, experiment=replace(cfg.experiment, seed=seed_base))
    bundle = prepare_split(cfg, index, test_fraction=test_fraction)
    out = []
    for c in c_values:
        rec = {"instance": index, "seed": bundle.seed, "c": c}
        try:
            report, _ = train(bundle.ds_train, bundle.est_train, bundle.phi_train, cfg, bundle.seed,
                              c, cfg.constraints.alpha)
        except SubgroupError as exc:
            rec.update({"reject": False, "error": f"{type(exc).__name__}: {exc}"})
            out.append(rec)
            continue
        rec["collapsed"] = report.collapsed
        rec["collapse_reason"] = report.collapse_reason
        if report.collapse_reason == "collapse":
            # a size-infeasible selection is still tested; only a degenerate one is skipped
            rec.update({"reject": False, "note": "collapsed"})
        else:
            mask = select(report.model, bundle.ds_test.features, cfg)
            rng = np.random.default_rng(derive_seed(bundle.seed, 1, int(round(c * 1000))))
            rec.update(null_test(bundle.phi_test, mask, c, iters, significance, rng))
        out.append(rec)
    return out


def run_typei(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    s = cfg.typei
    args = (s.c_values, s.bootstrap_iters, s.significance, s.test_fraction, cfg.experiment.seed)
    nested = _map_units(typei_instance, cfg, list(range(s.instances)), *args)
    records = [r for recs in nested for r in recs]
    rates = {}
    for c in s.c_values:
        recs = [r for r in records if r["c"] == c]
        rates[str(c)] = sum(bool(r["reject"]) for r in recs) / len(recs)
    return {"rejection_rate": rates, "records": records, "config": cfg.to_dict(),
            "versions": versions(), "wall_clock": time.perf_counter() - t0}
