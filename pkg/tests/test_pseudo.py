from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgroup_gda.data import Dataset
from subgroup_gda.errors import NumericalError, ParameterError
from subgroup_gda.gda import subgroup_functional
from subgroup_gda.nuisance import NuisanceEstimates
from subgroup_gda.pseudo import aiptw_phi, iptw_phi, overlap_h


def _one(a, y, mu1, mu0, e):
    ds = Dataset(np.zeros((1, 1)), [a], [y])
    return ds, NuisanceEstimates([e], [mu0], [mu1])


@pytest.mark.parametrize("a,y,mu1,mu0,e,expected", [
    (1, 1.0, 0.5, 0.3, 0.5, 1.2),
    (0, 0.3, 0.5, 0.3, 0.25, 0.2),
])
def test_aiptw_hand_values(a, y, mu1, mu0, e, expected):
    ds, est = _one(a, y, mu1, mu0, e)
    assert aiptw_phi(est, ds).phi[0] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("a", [0, 1])
def test_aiptw_zero_residual(a):
    mu1, mu0 = 0.7, -0.2
    ds, est = _one(a, mu1 if a else mu0, mu1, mu0, 0.3)
    assert aiptw_phi(est, ds).phi[0] == pytest.approx(mu1 - mu0, abs=1e-15)


@pytest.mark.parametrize("a,y,expected", [(1, 1.0, 2.0), (0, 1.0, -2.0), (1, 0.0, 0.0), (0, 0.0, 0.0)])
def test_iptw_hand_values(a, y, expected):
    ds, est = _one(a, y, 0.0, 0.0, 0.5)
    assert iptw_phi(est, ds).phi[0] == expected


@given(seed=st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_aiptw_reduces_to_iptw_without_outcome_model(seed):
    rng = np.random.default_rng(seed)
    n = 25
    ds = Dataset(np.zeros((n, 1)), rng.integers(0, 2, n), rng.standard_normal(n))
    est = NuisanceEstimates(rng.uniform(0.05, 0.95, n), np.zeros(n), np.zeros(n))
    assert np.allclose(aiptw_phi(est, ds).phi, iptw_phi(est, ds).phi, rtol=1e-14, atol=1e-14)


def test_uniform_weights_reproduce_plugin_ate():
    rng = np.random.default_rng(0)
    n = 200
    ds = Dataset(np.zeros((n, 1)), rng.integers(0, 2, n), rng.standard_normal(n))
    est = NuisanceEstimates(rng.uniform(0.1, 0.9, n), rng.standard_normal(n), rng.standard_normal(n))
    po = aiptw_phi(est, ds)
    f, _ = subgroup_functional(np.full(n, 0.37), po.phi)
    assert f == pytest.approx(po.phi.mean(), rel=1e-13)
    assert po.phi_max == np.abs(po.phi).max()


def test_non_finite_phi_names_row():
    ds = Dataset(np.zeros((2, 1)), [0, 1], [0.0, 1.0])
    est = NuisanceEstimates([0.5, 0.5], [0.0, np.inf], [0.0, 0.0])
    with pytest.raises(NumericalError) as ei:
        aiptw_phi(est, ds)
    assert "row 1" in str(ei.value)


def test_overlap_reference_values():
    assert overlap_h([0.02], 0.02).h[0] == 0.0
    assert overlap_h([0.5], 0.02).h[0] == pytest.approx(1 - 0.25 / 0.0196, abs=1e-12)
    assert overlap_h([0.5], 0.02).h[0] == pytest.approx(-11.7551, abs=1e-4)
    assert overlap_h([0.01], 0.02).h[0] == pytest.approx(0.4949, abs=1e-4)


def test_overlap_alpha_bounds():
    with pytest.raises(ParameterError):
        overlap_h([0.3], 0.5)
    scores = overlap_h([0.001, 0.5], 0.0)
    assert scores.disabled and np.all(np.isneginf(scores.h))


def test_overlap_sign_matches_interval_exactly():
    rng = np.random.default_rng(11)
    n = 100_000
    e = rng.uniform(0, 1, n)
    alpha = rng.uniform(0, 0.5, n)
    s = rng.uniform(0, 1, n)
    h = 1.0 - e * (1.0 - e) / (alpha * (1.0 - alpha))
    for i in range(0, n, 20_000):
        sl = slice(i, i + 20_000)
        hh = np.array([overlap_h([ei], ai).h[0] for ei, ai in zip(e[sl][:50], alpha[sl][:50])])
        assert np.array_equal(hh, h[sl][:50])
    inside = (alpha <= e) & (e <= 1 - alpha)
    assert np.array_equal(s * h <= 0, inside)


@given(e=st.floats(0.001, 0.999), alpha=st.floats(0.001, 0.499))
@settings(max_examples=200, deadline=None)
def test_overlap_symmetric(e, alpha):
    a = overlap_h([e], alpha).h[0]
    b = overlap_h([1 - e], alpha).h[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
