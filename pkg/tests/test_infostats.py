import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from dsa.infostats import (
    MI_CAP,
    anamorphosis,
    copula_mi,
    gaussian_mi,
    interaction_information,
    marginal_entropy,
    mutual_information,
    negentropy,
    seeds_for,
)

UNIFORM_J = 0.5 * np.log(2 * np.pi * np.e / 12.0)


def _plugin_mi(a, b, bins=20):
    """Binned plug-in mutual information on equiprobable bins."""
    qa = np.searchsorted(np.quantile(a, np.linspace(0, 1, bins + 1)[1:-1]), a)
    qb = np.searchsorted(np.quantile(b, np.linspace(0, 1, bins + 1)[1:-1]), b)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (qa, qb), 1.0)
    p = joint / joint.sum()
    pa, pb = p.sum(1), p.sum(0)
    nz = p > 0
    mi = float(np.sum(p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])))
    # Miller-Madow correction for the plug-in bias
    return mi - (bins - 1) ** 2 / (2 * len(a))


def _hist_entropy(x, bins=200):
    counts, edges = np.histogram(x, bins=bins)
    p = counts / counts.sum()
    w = np.diff(edges)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz] / w[nz])))


def test_anamorphosis_of_normal_column():
    x = np.random.default_rng(0).normal(size=10_000)
    z = anamorphosis(x)[:, 0]
    assert np.corrcoef(x, z)[0, 1] >= 0.999


def test_anamorphosis_distinct_values_are_quantiles():
    x = np.random.default_rng(1).permutation(50).astype(float)
    z = anamorphosis(x)[:, 0]
    expected = norm.ppf((np.arange(1, 51) - 0.5) / 50)
    assert np.allclose(np.sort(z), expected, atol=0, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([np.exp, np.tanh, np.arctan, lambda v: v**3 + v]))
def test_anamorphosis_rank_invariant(seed, g):
    x = np.random.default_rng(seed).normal(size=(200, 2))
    assert np.array_equal(anamorphosis(g(x)), anamorphosis(x))


def test_anamorphosis_rejects_constant():
    with pytest.raises(ValueError, match="constant"):
        anamorphosis(np.ones(20))


def test_negentropy_gaussian_below_threshold():
    x = np.random.default_rng(2).normal(size=(10_000, 2))
    r = negentropy(x, shuffles=50, seed=0)
    assert r.value <= 0.01
    assert not r.significant


def test_negentropy_uniform_closed_form_and_histogram_oracle():
    x = np.random.default_rng(3).uniform(size=10_000)
    r = negentropy(x, shuffles=50, seed=0)
    oracle = 0.5 * np.log(2 * np.pi * np.e * np.var(x)) - _hist_entropy(x)
    assert abs(UNIFORM_J - 0.1765) < 1e-4
    assert abs(r.value - UNIFORM_J) <= 0.02
    assert abs(oracle - UNIFORM_J) <= 0.02
    assert r.significant


def test_negentropy_duplicated_column_diverges():
    x = np.random.default_rng(4).normal(size=2000)
    r = negentropy(np.column_stack([x, x]), shuffles=50, seed=0)
    assert r.capped and r.value > r.mc_null_q95


def test_marginal_entropy_normal_and_uniform():
    rng = np.random.default_rng(5)
    h = marginal_entropy(np.column_stack([rng.normal(0, 2, 20_000), rng.uniform(0, 3, 20_000)]))
    assert np.isclose(h[0], 0.5 * np.log(2 * np.pi * np.e * 4), atol=0.01)
    assert np.isclose(h[1], np.log(3.0), atol=0.01)


def test_mutual_information_independent_and_identity():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(10_000, 2))
    r = mutual_information(x, [0], [1], shuffles=200, seed=1)
    assert r.value <= r.mc_null_q95
    same = mutual_information(np.column_stack([x[:, 0], x[:, 0]]), [0], [1], shuffles=10)
    assert same.capped and same.value == MI_CAP


def test_mutual_information_gaussian_closed_form():
    rng = np.random.default_rng(7)
    n = 100_000
    a = rng.normal(size=n)
    b = 0.5 * a + np.sqrt(0.75) * rng.normal(size=n)
    closed = -0.5 * np.log(1 - 0.25)
    assert abs(closed - 0.1438) < 1e-4
    r = mutual_information(np.column_stack([a, b]), [0], [1], shuffles=0)
    assert abs(r.value - closed) <= 0.01
    assert abs(_plugin_mi(a, b) - closed) <= 0.01
    assert np.isclose(copula_mi(a, b), r.value)


def test_gaussian_mi_is_symmetric_and_nonnegative():
    R = np.array([[1.0, 0.3, 0.1], [0.3, 1.0, -0.2], [0.1, -0.2, 1.0]])
    assert np.isclose(gaussian_mi(R, [0], [1, 2])[0], gaussian_mi(R, [1, 2], [0])[0])
    assert gaussian_mi(np.eye(3), [0], [1])[0] == 0.0


def test_interaction_information_signs():
    rng = np.random.default_rng(8)
    n = 5000
    xa, xb = rng.normal(size=(2, n))
    syn = interaction_information(xa, xb, xa + xb, shuffles=200, seed=2)
    assert syn.value > syn.mc_null_q95 > 0
    indep = interaction_information(xa, xb, rng.normal(size=n), shuffles=200, seed=3)
    assert abs(indep.value - indep.mc_null_mean) <= 3 * indep.mc_null_sd
    red = interaction_information(xa, xa, xa, shuffles=20, seed=4)
    assert red.value < 0 and red.capped


def test_interaction_information_forms_agree():
    rng = np.random.default_rng(9)
    n = 5000
    xa = rng.normal(size=n)
    xb = 0.4 * xa + rng.normal(size=n)
    y = xa - 0.5 * xb + rng.normal(size=n)
    r = interaction_information(xa, xb, y, shuffles=0, seed=5)
    assert abs(r.value - r.extra["conditional_form"]) <= 2 * r.extra["standard_error"]
    assert r.extra["forms_agree"]


def test_seeds_are_reproducible():
    a = [g.normal() for g in seeds_for([1, 2], 3)]
    b = [g.normal() for g in seeds_for([1, 2], 3)]
    assert a == b and len(set(a)) == 3
