"""Metrics for a hard subgroup selection, cross-validated hyperparameter choice
and the split-sample null test for a selected subgroup's effect."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import DiagnosticError, ParameterError, StudyError
from .nuisance import NuisanceEstimates, count_unbalanced

log = logging.getLogger(__name__)


@dataclass
class SubgroupMetrics:
    defined: bool
    reason: str | None = None
    n: int = 0
    n_selected: int = 0
    group_size_fraction: float = 0.0
    est_ate: float | None = None
    true_ate: float | None = None
    ate_error: float | None = None
    unbalanced_count: int | None = None
    precision: float | None = None
    recall: float | None = None
    aux_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self, prefix: str = "") -> dict:
        d = {k: v for k, v in self.to_dict().items() if k != "aux_metrics"}
        d.update(self.aux_metrics)
        return {prefix + k: v for k, v in d.items()}


def precision_recall(mask, true_label) -> tuple[float | None, float | None]:
    """Standard precision and recall; ``None`` where the ratio is 0/0."""
    m = np.asarray(mask).astype(bool)
    t = np.asarray(true_label).astype(bool)
    if m.shape != t.shape:
        raise ParameterError("mask and labels differ in length")
    tp = int((m & t).sum())
    precision = tp / int(m.sum()) if m.any() else None
    recall = tp / int(t.sum()) if t.any() else None
    return precision, recall


def subgroup_metrics(ds: Dataset, est: NuisanceEstimates | None, phi, mask,
                     overlap_alpha: float | None = None) -> SubgroupMetrics:
    """Hard-selection metrics; an empty selection yields an undefined record."""
    phi = np.asarray(phi, dtype=float)
    m = np.asarray(mask).astype(bool)
    if m.shape != (ds.n,) or phi.shape != (ds.n,):
        raise ParameterError("mask and phi must match the dataset rows")
    k = int(m.sum())
    out = SubgroupMetrics(defined=k > 0, n=ds.n, n_selected=k, group_size_fraction=k / ds.n)
    if k == 0:
        out.reason = "empty selection"
        return out
    out.est_ate = float(phi[m].mean())
    aux = ds.aux
    if "true_ite" in aux:
        out.true_ate = float(aux["true_ite"][m].mean())
        out.ate_error = abs(out.est_ate - out.true_ate)
    if "true_label" in aux:
        out.precision, out.recall = precision_recall(m, aux["true_label"])
    if est is not None:
        try:
            out.unbalanced_count = count_unbalanced(ds, est, m)[0]
        except DiagnosticError as exc:
            out.reason = f"balance undefined: {exc}"
        if overlap_alpha is not None and overlap_alpha > 0:
            outside = (est.e_hat < overlap_alpha) | (est.e_hat > 1 - overlap_alpha)
            out.aux_metrics["frac_outside_overlap"] = float(outside[m].mean())
    metrics = out.aux_metrics
    metrics["ate_improvement"] = out.est_ate - float(phi.mean())
    if "risk" in aux:
        metrics["average_risk"] = float(aux["risk"][m].mean())
    if "cost" in aux:
        metrics["total_cost"] = float(aux["cost"][m].sum())
        metrics["cost_limit_half"] = 0.5 * ds.n
    if "sensitive" in aux:
        metrics["sensitive_ratio"] = float(aux["sensitive"][m].mean())
    return out


# ---------------------------------------------------------------------------
# split-sample null test


def bootstrap_p_value(phi_holdout, observed: float, subsample_size: int, iters: int, rng) -> float:
    """One-sided p-value of ``observed`` against means of random holdout subsamples.

    Each draw takes ``subsample_size`` rows without replacement.
    """
    phi = np.asarray(phi_holdout, dtype=float)
    n = phi.shape[0]
    if not 1 <= subsample_size <= n:
        raise ParameterError(f"subsample size must lie in [1, {n}]")
    means = np.empty(iters)
    for b in range(iters):
        means[b] = phi[rng.choice(n, subsample_size, replace=False)].mean()
    return float(np.mean(means >= observed))


@dataclass(frozen=True)
class TypeIStudyConfig:
    instances: int = 30
    bootstrap_iters: int = 2000
    significance: float = 0.05
    size_c: float = 0.6
    test_fraction: float = 0.5
    seed_base: int = 0

    def validate(self) -> "TypeIStudyConfig":
        if self.instances < 1:
            raise ParameterError("instances must be >= 1")
        if self.bootstrap_iters < 100:
            raise ParameterError("bootstrap_iters must be >= 100")
        if not 0 < self.significance <= 1:
            raise ParameterError("significance must lie in (0, 1]")
        if not 0 < self.size_c < 1 or not 0 < self.test_fraction < 1:
            raise ParameterError("size_c and test_fraction must lie in (0, 1)")
        return self


def null_test(phi_holdout, mask, size_c: float, iters: int, significance: float, rng) -> dict:
    """Steps 3-4 of the split-sample protocol for one instance."""
    m = np.asarray(mask).astype(bool)
    phi = np.asarray(phi_holdout, dtype=float)
    if not m.any():
        return {"ate_holdout": None, "group_size": 0.0, "p_value": None, "reject": False,
                "note": "empty selection"}
    observed = float(phi[m].mean())
    k = int(np.floor(size_c * phi.shape[0] + 0.5))
    p = bootstrap_p_value(phi, observed, max(k, 1), iters, rng)
    return {"ate_holdout": observed, "group_size": float(m.mean()), "p_value": p,
            "reject": bool(p < significance)}


def type_i_error_study(cfg: TypeIStudyConfig, run_config) -> tuple[float, list]:
    """Rejection rate of the split-sample test over independent null datasets.

    ``run_config`` is a :class:`~subgroup_gda.config.RunConfig`; its data
    source must be the synthetic null variant.
    """
    from .pipeline import typei_instance

    cfg.validate()
    records = [typei_instance(run_config, i, [cfg.size_c], cfg.bootstrap_iters, cfg.significance,
                              cfg.test_fraction, cfg.seed_base)[0] for i in range(cfg.instances)]
    rate = sum(r["reject"] for r in records) / len(records)
    return rate, records


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvCell:
    params: dict
    size: float | None = None
    est_ate: float | None = None
    unbalanced: float | None = None
    collapsed_folds: int = 0
    folds: int = 0

    @property
    def usable(self) -> bool:
        return self.size is not None


def grid_cells(grid: dict | None) -> list[dict]:
    if not grid:
        return [{}]
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def choose_cell(cells: list[CvCell], size_c: float, band: float = 0.05) -> CvCell:
    """Among cells whose mean validation size is within ``band`` of ``c``, the
    largest mean validation effect wins; ties go to fewer unbalanced covariates,
    then smaller ``beta``. With no cell in the band, the size closest to ``c`` wins."""
    usable = [c for c in cells if c.usable]
    if not usable:
        raise StudyError("every cross-validation cell collapsed")
    inside = [c for c in usable if abs(c.size - size_c) <= band]

    def beta(c):
        return c.params.get("beta", 0.0)

    if inside:
        def key(c):
            unb = c.unbalanced if c.unbalanced is not None else np.inf
            return (-c.est_ate, unb, beta(c))
        return min(inside, key=key)
    return min(usable, key=lambda c: (abs(c.size - size_c), beta(c)))


def cross_validate(ds_train: Dataset, est: NuisanceEstimates, phi, grid: dict | None, k: int,
                   seed: int, run_config, size_c: float | None = None, alpha: float | None = None):
    """Pick surrogate/solver hyperparameters by k-fold validation on the training split.

    Nuisances are held fixed (fitted once on the full training split). A
    single-cell grid returns immediately without training.
    Returns ``(chosen params, list of CvCell)``.
    """
    from .pipeline import train_on_rows

    cells = grid_cells(grid)
    if len(cells) == 1:
        return cells[0], [CvCell(cells[0])]
    from .data import kfold_indices

    size_c = run_config.constraints.size_c if size_c is None else size_c
    folds = kfold_indices(ds_train.n, k, seed)
    phi = np.asarray(phi, dtype=float)
    results = []
    for params in cells:
        sizes, effects, unbalanced, collapsed = [], [], [], 0
        for fi, fold in enumerate(folds):
            report, mask = train_on_rows(ds_train, est, phi, fold.train, fold.test, run_config,
                                         seed=seed * 1000 + fi, size_c=size_c, alpha=alpha, **params)
            if report.collapsed or not mask.any():
                collapsed += 1
                continue
            val = ds_train.subset(fold.test)
            m = subgroup_metrics(val, est.subset(fold.test), phi[fold.test], mask)
            sizes.append(m.group_size_fraction)
            effects.append(m.est_ate)
            if m.unbalanced_count is not None:
                unbalanced.append(m.unbalanced_count)
        cell = CvCell(params, folds=len(folds), collapsed_folds=collapsed)
        if sizes:
            cell.size = float(np.mean(sizes))
            cell.est_ate = float(np.mean(effects))
            cell.unbalanced = float(np.mean(unbalanced)) if unbalanced else None
        results.append(cell)
        log.info("cv cell %s: size=%s ate=%s", params, cell.size, cell.est_ate)
    return choose_cell(results, size_c).params, results
