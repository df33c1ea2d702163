import numpy as np
import pytest

from dsa.field import Grid, SpatioTemporalField, TimeAxis
from dsa.predictability import aggregate_correlation, predictability_map
from dsa.synthetic import shot_noise_ar1

GRID = Grid(np.linspace(-20.0, 20.0, 4), np.linspace(0.0, 40.0, 5))


def _sources(n=5000, seed=1):
    rng = np.random.default_rng(seed)
    return np.column_stack([shot_noise_ar1(n, 0.9, 0.05, rng, True), shot_noise_ar1(n, 0.8, 0.05, rng, True)])


def _uniform(z, grid=GRID):
    n = z.size
    return SpatioTemporalField(grid, TimeAxis.regular(n), np.broadcast_to(z[:, None, None], (n,) + grid.shape))


def test_linear_copy_is_fully_redundant():
    x = _sources()
    p = predictability_map(x, _uniform(3.0 * x[:, 0] + 1.0), 1, shuffles=200)
    assert np.all(np.abs(np.abs(p.raw[0]) - 1.0) <= 1e-6)
    assert np.all(np.abs(p.raw[1]) <= p.null_q95[1])
    assert abs(aggregate_correlation(p) - 1.0) <= 0.02
    assert p.clip_count == 0


def test_square_link_needs_second_order():
    x = _sources()
    z = _uniform(x[:, 0] ** 2)
    p1 = predictability_map(x, z, 1, shuffles=1000)
    p2 = predictability_map(x, z, 2, shuffles=1000)
    assert np.all(~p1.above_null[0])
    assert np.all(p2.above_null[0])
    assert np.all(p2.effective[0] > p2.null_q95[0])


def test_partially_correlated_predictand_matches_pearson():
    aggs, pearson = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = shot_noise_ar1(20_000, 0.9, 0.05, rng, True)
        e = shot_noise_ar1(20_000, 0.9, 0.05, rng, True)
        z = 0.6 * x + np.sqrt(1 - 0.36) * e
        grid = Grid([0.0, 1.0], [0.0, 1.0])
        aggs.append(aggregate_correlation(predictability_map(x, _uniform(z, grid), 1, shuffles=0)))
        pearson.append(np.corrcoef(x, z)[0, 1])
    assert abs(np.mean(aggs) - np.mean(pearson)) <= 0.05
    assert abs(np.mean(aggs) - 0.6) <= 0.05


def test_independent_predictand_effective_mean_is_null():
    x = _sources(seed=2)
    rng = np.random.default_rng(3)
    Z = np.stack([shot_noise_ar1(5000, 0.85, 0.05, rng, True) for _ in range(20)], axis=1).reshape(5000, 4, 5)
    p = predictability_map(x, SpatioTemporalField(GRID, TimeAxis.regular(5000), Z), 1, shuffles=1000)
    eff = p.effective.mean(axis=(1, 2))
    band = 2 * p.null_sd.mean(axis=(1, 2)) / np.sqrt(20)
    # the null band of a mean over 20 cells
    assert np.all(np.abs(eff) <= 3 * band)
    assert abs(aggregate_correlation(p)) <= np.max(p.null_q95)


def test_null_is_reproducible_and_seeded():
    x = _sources(n=2000)
    z = _uniform(np.random.default_rng(4).normal(size=2000).cumsum())
    a = predictability_map(x, z, 1, shuffles=100, seed=7)
    b = predictability_map(x, z, 1, shuffles=100, seed=7)
    c = predictability_map(x, z, 1, shuffles=100, seed=8)
    assert np.array_equal(a.null_q95, b.null_q95)
    assert not np.array_equal(a.null_q95, c.null_q95)


def test_write_maps(tmp_path):
    x = _sources(n=1000)
    p = predictability_map(x, _uniform(x[:, 1]), 1, shuffles=20)
    files = p.write(tmp_path)
    assert len(files) == 8 and all(f.exists() for f in files)


def test_input_validation():
    x = _sources(n=500)
    with pytest.raises(ValueError, match="time axis"):
        predictability_map(x, _uniform(np.arange(400.0)), 1)
    with pytest.raises(ValueError, match="constant"):
        predictability_map(np.ones((500, 1)), _uniform(x[:, 0]), 1)
    p2 = predictability_map(x, _uniform(x[:, 0] ** 2), 2, shuffles=0)
    with pytest.raises(ValueError, match="first-order"):
        aggregate_correlation(p2)
