from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgroup_gda.config import preset_config
from subgroup_gda.data import Dataset
from subgroup_gda.errors import ParameterError, StudyError
from subgroup_gda.evaluation import (CvCell, TypeIStudyConfig, bootstrap_p_value, choose_cell, cross_validate,
                                     grid_cells, null_test, precision_recall, subgroup_metrics,
                                     type_i_error_study)
from subgroup_gda.nuisance import NuisanceEstimates
from subgroup_gda.synth import DgpConfig, generate


def _ds_est(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    a = rng.integers(0, 2, n)
    ds = Dataset(X, a, rng.standard_normal(n), {"true_ite": rng.standard_normal(n),
                                                "true_label": (rng.random(n) < 0.4).astype(float)})
    est = NuisanceEstimates(rng.uniform(0.005, 0.995, n), np.zeros(n), np.zeros(n))
    return ds, est, rng.standard_normal(n)


def test_full_selection_reproduces_sample_mean():
    ds, est, phi = _ds_est()
    m = subgroup_metrics(ds, est, phi, np.ones(ds.n, bool), overlap_alpha=0.02)
    assert m.defined and m.group_size_fraction == 1.0
    assert m.est_ate == pytest.approx(phi.mean(), rel=1e-14)
    assert m.aux_metrics["ate_improvement"] == pytest.approx(0.0, abs=1e-14)
    assert 0 < m.aux_metrics["frac_outside_overlap"] < 0.1


def test_empty_selection_is_undefined():
    ds, est, phi = _ds_est()
    m = subgroup_metrics(ds, est, phi, np.zeros(ds.n, bool))
    assert not m.defined and m.reason and m.est_ate is None


def test_full_sample_effect_ignores_surrogate():
    ds, est, phi = _ds_est()
    full = np.ones(ds.n, bool)
    a = subgroup_metrics(ds, est, phi, full)
    b = subgroup_metrics(ds, None, phi, full)
    assert a.est_ate == b.est_ate


def test_oracle_top_half_effect():
    ds = generate(DgpConfig(n=100_000), seed=0).dataset
    tau = ds.aux["true_ite"]
    mask = tau > np.median(tau)
    m = subgroup_metrics(ds, None, tau, mask)
    target = 0.1378 * np.sqrt(2 / np.pi)
    assert m.true_ate == pytest.approx(target, rel=0.03)
    assert m.ate_error == 0.0


def test_aux_metrics_present():
    sd = generate(DgpConfig(n=300), seed=1, constraint_aux=True)
    ds = sd.dataset
    m = subgroup_metrics(ds, None, ds.aux["true_ite"], np.arange(300) < 150)
    for key in ("average_risk", "total_cost", "cost_limit_half", "sensitive_ratio"):
        assert key in m.aux_metrics
    assert m.aux_metrics["cost_limit_half"] == 150.0


def test_precision_recall_extremes():
    t = np.array([1, 0, 1, 0, 0], bool)
    assert precision_recall(t, t) == (1.0, 1.0)
    assert precision_recall(~t, t) == (0.0, 0.0)
    assert precision_recall(np.zeros(5, bool), t) == (None, 0.0)
    with pytest.raises(ParameterError):
        precision_recall(t, t[:3])


@given(seed=st.integers(0, 10**6))
@settings(max_examples=50, deadline=None)
def test_precision_recall_cross_identity(seed):
    rng = np.random.default_rng(seed)
    m = rng.random(30) < 0.5
    t = rng.random(30) < 0.5
    p, r = precision_recall(m, t)
    if p is not None and r is not None:
        assert p * m.sum() == pytest.approx(r * t.sum())


def test_p_value_monotone():
    phi = np.linspace(-1, 1, 101)
    rng = np.random.default_rng(0)
    low = bootstrap_p_value(phi, -0.2, 50, 500, rng)
    high = bootstrap_p_value(phi, 0.2, 50, 500, rng)
    assert low > 0.5 > high
    with pytest.raises(ParameterError):
        bootstrap_p_value(phi, 0.0, 0, 100, rng)


def test_null_test_empty_mask():
    out = null_test(np.zeros(10), np.zeros(10, bool), 0.5, 100, 0.05, np.random.default_rng(0))
    assert out["reject"] is False and out["p_value"] is None


def test_random_masks_are_calibrated():
    rng = np.random.default_rng(4)
    rejections = []
    for _ in range(50):
        phi = rng.standard_normal(400)
        mask = rng.random(400) < 0.6
        rejections.append(null_test(phi, mask, 0.6, 500, 0.05, rng)["reject"])
    assert np.mean(rejections) <= 0.10


def test_top_selection_is_rejected():
    phi = np.random.default_rng(0).standard_normal(300)
    mask = phi > np.quantile(phi, 0.4)
    out = null_test(phi, mask, 0.6, 500, 0.05, np.random.default_rng(1))
    assert out["reject"] and out["p_value"] == 0.0


def _tiny_null_cfg():
    return preset_config("appendix-G", data={"dgp": {"n": 400}}, gda={"t_max": 60},
                         nuisance={"epochs": 5, "hidden_size": 8}, surrogate={"hidden_size": 8},
                         experiment={"parallelism": 1})


def test_study_single_instance():
    rate, records = type_i_error_study(TypeIStudyConfig(instances=1, bootstrap_iters=200), _tiny_null_cfg())
    assert rate in (0.0, 1.0) and len(records) == 1


def test_study_with_unit_significance_rejects_all():
    rate, records = type_i_error_study(TypeIStudyConfig(instances=3, bootstrap_iters=200, significance=1.0),
                                       _tiny_null_cfg())
    assert all(r["p_value"] < 1.0 for r in records)
    assert rate == 1.0


def test_study_config_validation():
    with pytest.raises(ParameterError):
        TypeIStudyConfig(instances=0).validate()
    with pytest.raises(ParameterError):
        TypeIStudyConfig(bootstrap_iters=10).validate()


def test_grid_cells_product():
    assert grid_cells(None) == [{}]
    cells = grid_cells({"beta": [1e-4, 1e-3], "hidden_size": [50]})
    assert cells == [{"beta": 1e-4, "hidden_size": 50}, {"beta": 1e-3, "hidden_size": 50}]


def test_choose_cell_rules():
    a = CvCell({"beta": 1e-3}, size=0.5, est_ate=0.1, unbalanced=0)
    b = CvCell({"beta": 1e-4}, size=0.5, est_ate=0.1, unbalanced=0)
    assert choose_cell([a, b], 0.5).params == {"beta": 1e-4}
    c = CvCell({"beta": 1e-2}, size=0.52, est_ate=0.3, unbalanced=2)
    assert choose_cell([a, b, c], 0.5).params == {"beta": 1e-2}
    far = [CvCell({"beta": 1e-3}, size=0.2, est_ate=1.0), CvCell({"beta": 1e-4}, size=0.35, est_ate=0.0)]
    assert choose_cell(far, 0.5).params == {"beta": 1e-4}
    with pytest.raises(StudyError):
        choose_cell([CvCell({"beta": 1e-3})], 0.5)


def test_single_cell_grid_skips_training():
    ds, est, phi = _ds_est()
    params, cells = cross_validate(ds, est, phi, {"beta": [1e-4]}, 5, 0, run_config=None)
    assert params == {"beta": 1e-4} and cells[0].folds == 0


def test_two_cell_grid_trains_every_fold():
    from subgroup_gda.pipeline import prepare_split

    cfg = preset_config("paper-synthetic-confounded", data={"dgp": {"n": 600}}, gda={"t_max": 80},
                        nuisance={"epochs": 5, "hidden_size": 8}, surrogate={"hidden_size": 8})
    b = prepare_split(cfg, 0)
    params, cells = cross_validate(b.ds_train, b.est_train, b.phi_train, {"beta": [1e-4, 1e-3]}, 2, 0, cfg)
    assert params in ({"beta": 1e-4}, {"beta": 1e-3})
    assert [c.folds for c in cells] == [2, 2]
    assert all(c.usable for c in cells)
