import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsa.field import field_series
from dsa.interaction import interaction_from_samples
from dsa.numdiff import monomial_exponents
from dsa.synthetic import (
    DEFAULTS,
    KINDS,
    PolynomialSystem,
    Scenario,
    brute_force_interaction,
    generate,
    logistic_lyapunov,
    logistic_map,
    score_recovery,
    shot_noise_ar1,
    traveling_wave,
)


def _two_orbit_lyapunov(x0, n, eps=1e-9):
    """Separation of a shadow orbit renormalized every step."""
    x, y, acc = x0, x0 + eps, 0.0
    for _ in range(n):
        x = 4.0 * x * (1.0 - x)
        y = 4.0 * y * (1.0 - y)
        d = abs(y - x)
        acc += np.log(d / eps)
        y = x + eps * np.sign(y - x) if d > 0 else x + eps
    return acc / n


def test_wave_frequency_at_fixed_point():
    f = traveling_wave(2.0, 0.5)
    series = f.values[0, :, 0, 0]
    power = np.abs(np.fft.rfft(series))
    freq = np.fft.rfftfreq(series.size, f.time.step) * 2 * np.pi
    assert abs(freq[np.argmax(power)] - 1.5) <= 2 * np.pi / (series.size * f.time.step)


def test_linear_mixture_reproduces_from_mixing():
    truth, obs, meta = generate(Scenario("linear-mixture", {"noise": 0.0}))
    x, y = field_series(truth), field_series(obs)
    assert np.allclose(y, x @ meta["mixing"].T, atol=1e-12)


def test_logistic_lyapunov_is_ln2():
    orbit = logistic_map(100_000, rng=np.random.default_rng(0))
    assert abs(logistic_lyapunov(orbit) - np.log(2)) <= 0.02 * np.log(2)
    assert abs(_two_orbit_lyapunov(0.3141, 100_000) - np.log(2)) <= 0.02 * np.log(2)


def test_scores_identity_permutation_noise():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2000, 2))
    assert np.allclose(score_recovery(x, x).scores, 1.0)
    r = score_recovery(x, -x[:, ::-1])
    assert r.pairs == ((0, 1), (1, 0)) and np.allclose(r.signs, -1.0)
    assert np.all(score_recovery(x, rng.normal(size=(2000, 2))).scores <= 0.1)


def test_square_tendency_oracle():
    sys_ = PolynomialSystem(1, ({(2,): 1.0},))
    x = np.linspace(-1, 1, 11)[:, None]
    assert np.allclose(brute_force_interaction(sys_, 2, x).per_sample, 2.0)
    assert np.allclose(brute_force_interaction(sys_, 1, x).per_sample[:, 0, 0], 2 * x[:, 0])


def test_product_tendency_offdiagonal():
    sys_ = PolynomialSystem(2, ({(1, 1): 1.0}, {(0, 0): 0.0}))
    x = np.random.default_rng(2).normal(size=(5, 2))
    t = brute_force_interaction(sys_, 1, x)
    assert np.allclose(t.per_sample[:, 0, 0], x[:, 1])
    assert np.allclose(t.per_sample[:, 0, 1], x[:, 0])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_random_cubic_matches_estimator(seed):
    rng = np.random.default_rng(seed)
    exps = monomial_exponents(2, 3)
    terms = tuple({tuple(int(v) for v in e): float(rng.normal()) for e in exps} for _ in range(2))
    sys_ = PolynomialSystem(2, terms)
    x = rng.uniform(-1, 1, size=(400, 2))
    for k in (1, 2, 3):
        est = interaction_from_samples(x, sys_(x), k, degree=3)
        assert np.max(np.abs(est.per_sample - brute_force_interaction(sys_, k, x).per_sample)) <= 1e-4


def test_shot_noise_standardized_and_reproducible():
    a = shot_noise_ar1(5000, 0.9, 0.1, np.random.default_rng(3), min_kick=1.0)
    b = shot_noise_ar1(5000, 0.9, 0.1, np.random.default_rng(3), min_kick=1.0)
    assert np.array_equal(a, b)
    assert np.isclose(a.mean(), 0.0, atol=1e-12) and np.isclose(a.std(), 1.0)


@pytest.mark.parametrize("kind", sorted(KINDS))
def test_every_scenario_generates(kind):
    params = {"n": 1000} if "n" in DEFAULTS[kind] else {}
    truth, obs, meta = generate(Scenario(kind, params, seed=4))
    assert meta["kind"] == kind
    assert np.all(np.isfinite(obs.values))


def test_bad_parameters_rejected():
    with pytest.raises(ValueError):
        generate(Scenario("linear-mixture", {"n": 10}))
    with pytest.raises(ValueError):
        PolynomialSystem(1, ({(7,): 1.0},))
    with pytest.raises(ValueError):
        logistic_map(10, r=5.0)
