from __future__ import annotations

import json
import time

import numpy as np
import pytest

from helpers import check_gradients, random_state
from subgroup_gda import constraints as C
from subgroup_gda import data, gda, nuisance, pseudo, surrogate, synth
from subgroup_gda.cli import main
from subgroup_gda.config import preset_config
from subgroup_gda.pipeline import run_experiment, run_typei

pytestmark = pytest.mark.acceptance

REPLICATES = 20


def _means(report, c, alpha, *metrics):
    return [report.mean(m, c=c, alpha=alpha) for m in metrics]


# ---------------------------------------------------------------------------
# exactness and gradient properties


def test_c1_overlap_sign_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n_alpha, per = 1000, 100
    bad = 0
    for alpha in rng.uniform(0, 0.5, n_alpha):
        e = rng.uniform(0, 1, per)
        # a few draws sit exactly on the band edges
        e[:5] = [alpha, 1 - alpha, alpha, 1 - alpha, 0.5]
        s = rng.uniform(1e-12, 1, per)
        inside = (alpha <= e) & (e <= 1 - alpha)
        bad += int(np.sum((s * pseudo.overlap_h(e, float(alpha)).h <= 0) != inside))
    secs = time.perf_counter() - t0
    ok = bad == 0 and secs < 1.0
    verdict("criterion 1 (overlap sign equivalence)", ok, f"{bad} counterexamples in {n_alpha * per} triples, {secs:.2f}s")
    assert ok


def _smooth_state(family, seed):
    # redraw until no residual sits on a ReLU kink, where central differences are meaningless
    for k in range(50):
        state = random_state(family, 1000 * seed + k)
        model, X, phi, cset, _ = state
        if np.min(np.abs(gda.evaluate(model, X, phi, cset).g.values)) > 1e-4:
            return state
    raise RuntimeError("no smooth state found")


def test_c2_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst = {}
    for family in ("mlp", "tree", "forest"):
        errs = []
        for seed in range(20):
            model, X, phi, cset, lam = _smooth_state(family, seed)
            e_theta, e_lam, _ = check_gradients(model, X, phi, cset, lam, 1e-3, l1_coef=0.01)
            errs.append(max(e_theta, e_lam))
        worst[family] = max(errs)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and secs < 30
    detail = ", ".join(f"{f} max rel err {v:.1e}" for f, v in worst.items())
    verdict("criterion 2 (gradient fidelity)", ok, f"{detail}, {secs:.1f}s")
    assert ok


def test_c3_constraint_gate(verdict):
    rng = np.random.default_rng(3)
    checked = 0
    failures = 0
    for family in ("mlp", "tree", "forest"):
        for _ in range(30):
            n = 25
            X = rng.standard_normal((n, 3))
            phi = rng.standard_normal(n)
            e_hat = rng.uniform(0.2, 0.8, n)
            cset = C.build_constraint_set(float(rng.uniform(1e-3, 0.01)), pseudo.overlap_h(e_hat, 0.1),
                                          [C.LinearConstraint(-5.0, rng.uniform(0, 1, n) / n, "slack")])
            model = surrogate.build_surrogate(family, X, int(rng.integers(1 << 30)), hidden_size=5, depth=2,
                                              n_trees=3)
            g = gda.evaluate(model, X, phi, cset).g.values
            if np.any(g > -1e-6):
                continue
            lam = rng.uniform(0, 10, cset.m) * 10.0 ** rng.integers(-3, 4)
            same = np.array_equal(gda.grad_theta(model, X, phi, lam, cset),
                                  gda.grad_theta(model, X, phi, np.zeros(cset.m), cset))
            zero = gda.penalty_terms(g, lam, 0.0) == 0.0
            failures += int(not (same and zero))
            checked += 1
    ok = failures == 0 and checked >= 60
    verdict("criterion 3 (constraint gate)", ok, f"{failures} failures over {checked} all-slack states")
    assert ok


# ---------------------------------------------------------------------------
# end-to-end studies


@pytest.fixture(scope="module")
def confounded():
    cfg = preset_config("paper-synthetic-confounded",
                        experiment={"splits": REPLICATES, "alpha_values": [0.02, 0.0], "parallelism": 1})
    t0 = time.perf_counter()
    rep = run_experiment(cfg)
    return rep, time.perf_counter() - t0


def test_c4_confounded_headline(verdict, confounded):
    rep, secs = confounded
    size, true_ate, err = _means(rep, 0.5, 0.02, "test_group_size_fraction", "test_true_ate", "test_ate_error")
    ok = 0.45 <= size <= 0.55 and 0.07 <= true_ate <= 0.13 and err <= 0.03
    verdict("criterion 4 (confounded headline)", ok,
            f"size {size:.3f}, true ATE {true_ate:.4f}, ATE error {err:.4f}, {secs:.0f}s for both alpha arms")
    assert ok


def test_c5_overlap_feasibility(verdict, confounded):
    rep, _ = confounded
    with_overlap = rep.mean("train_frac_outside_overlap", c=0.5, alpha=0.02)
    without = rep.mean("train_frac_outside_overlap", c=0.5, alpha=0.0)
    ok = with_overlap <= 0.01 and without >= 5 * with_overlap and without > 0
    verdict("criterion 5 (overlap feasibility)", ok,
            f"outside-band fraction {with_overlap:.4f} with overlap rows, {without:.4f} without")
    assert ok


def test_c6_multi_constraint(verdict):
    cfg = preset_config("appendix-E4", experiment={"splits": REPLICATES, "parallelism": 1})
    rep = run_experiment(cfg)
    n_test = rep.mean("test_n", c=0.5)
    risk, cost, ratio = _means(rep, 0.5, 0.02, "test_average_risk", "test_total_cost", "test_sensitive_ratio")
    limit = 0.5 * n_test
    ok = risk <= 0.06 and cost <= 1.05 * limit and 0.47 <= ratio <= 0.53
    verdict("criterion 6 (multi-constraint)", ok,
            f"risk {risk:.4f}, cost {cost:.1f} vs limit {limit:.0f}, sensitive ratio {ratio:.3f}")
    assert ok


def test_c7_binary_identification(verdict):
    cfg = preset_config("appendix-F", experiment={"splits": REPLICATES, "c_values": [0.6, 0.8], "parallelism": 1})
    rep = run_experiment(cfg)
    prec6, rec6 = _means(rep, 0.6, 0.0, "test_precision", "test_recall")
    rec8 = rep.mean("test_recall", c=0.8, alpha=0.0)
    ok = prec6 >= 0.85 and rec6 >= 0.75 and rec8 >= 0.90
    verdict("criterion 7 (binary identification)", ok,
            f"c=0.6 precision {prec6:.3f} recall {rec6:.3f}; c=0.8 recall {rec8:.3f}")
    assert ok


def test_c8_type_i_error(verdict):
    cfg = preset_config("appendix-G", typei={"instances": 30, "bootstrap_iters": 2000},
                        experiment={"parallelism": 1})
    t0 = time.perf_counter()
    rates = run_typei(cfg)["rejection_rate"]
    secs = time.perf_counter() - t0
    limits = {"0.8": 0.10, "0.6": 0.10, "0.4": 0.25}
    ok = all(rates[c] <= lim for c, lim in limits.items())
    detail = ", ".join(f"c={c} rate {rates[c]:.3f} (limit {lim})" for c, lim in limits.items())
    verdict("criterion 8 (type I error)", ok, f"{detail}, {secs:.0f}s")
    assert ok


def test_c9_stability(verdict):
    ratios = []
    for seed in range(5):
        sd = synth.generate(synth.DgpConfig(), seed=seed)
        sp = data.split_indices(sd.dataset.n, 0.5, seed)
        tr = sd.dataset.subset(sp.train)
        pm = nuisance.fit_propensity(tr)
        om = nuisance.fit_outcome(tr, seed=seed)
        phi = pseudo.aiptw_phi(nuisance.predict_nuisance(pm, om, tr.features), tr).phi
        cset = C.build_constraint_set(0.7, None, n=tr.n)
        var = {}
        for obj in ("modified", "plain"):
            cfg = gda.GdaConfig(eta=0.5, t_max=1500, objective=obj, converge_window=10**9, max_restarts=0,
                                seed=seed)
            rep = gda.run(tr.features, phi, cset, surrogate.build_surrogate("mlp", tr.features, seed), cfg,
                          diagnostics=False)
            var[obj] = float(np.var(np.asarray(rep.traces.size)[-500:]))
        ratios.append((var["modified"], var["plain"]))
    ok = all(m < p for m, p in ratios)
    detail = "; ".join(f"{m:.2e} vs {p:.2e}" for m, p in ratios)
    verdict("criterion 9 (stability)", ok, f"final-500 size variance, gated vs plain: {detail}")
    assert ok


def test_c10_determinism_and_infeasibility(verdict, tmp_path):
    cfg = {"preset": "paper-synthetic-confounded", "experiment": {"parallelism": 1}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["fit", "--config", str(path), "--out", str(tmp_path / name)]) for name in ("a", "b")]
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                    for f in ("report.json", "surrogate.json", "nuisance.json"))
    bad = {"preset": "appendix-E4", "data": {"dgp": {"n": 2000}},
           "constraints": {"size_c": 0.99, "extra": [{"type": "budget", "column": "cost", "limit": 0.05}]},
           "gda": {"t_max": 1000, "max_restarts": 1}, "experiment": {"parallelism": 1}}
    bad_path = tmp_path / "bad.json"
    bad_path.write_text(json.dumps(bad))
    code = main(["fit", "--config", str(bad_path), "--out", str(tmp_path / "bad")])
    report = json.loads((tmp_path / "bad" / "report.json").read_text())
    flagged = code == 4 and report["collapsed"] is True and report["feasible"] is False
    ok = identical and codes == [0, 0] and flagged
    verdict("criterion 10 (determinism and infeasibility)", ok,
            f"reruns bit-identical: {identical} (exit {codes}); infeasible set exit {code}, "
            f"collapsed {report['collapsed']}, feasible {report['feasible']}")
    assert ok
