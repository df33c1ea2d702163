import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsa.field import Grid, SpatioTemporalField, TimeAxis
from dsa.spacetime import (
    CoevolutionManifold,
    SubspaceBasis,
    compose,
    decompose,
    estimate_coevolution,
    relative_rms,
    retrieval_product,
)
from dsa.synthetic import Scenario, generate, traveling_wave


@pytest.fixture(scope="module")
def wave():
    f = traveling_wave(2.0, 0.5)
    m = estimate_coevolution(f)
    return f, m, decompose(f, m)


def _separable(g, h, lat=None):
    s = np.linspace(0.0, 2 * np.pi, g.size)
    lat = np.linspace(-10.0, 10.0, 4) if lat is None else lat
    vals = h[:, None, None] * np.ones(lat.size)[None, :, None] * g[None, None, :]
    return SpatioTemporalField(Grid(lat, s), TimeAxis.regular(h.size, 0.05), vals)


def test_wave_celerity_and_rank(wave):
    f, m, _ = wave
    assert m.rank == 1 and m.r_space == 1 and m.r_time == 1
    assert abs(m.phase_speed("lon") - 2.0) <= 0.02


def test_wave_temporal_structure_is_canonic(wave):
    f, _, p = wave
    t = f.time.timestamps
    target = np.cos(1.5 * t)
    target = (target - target.mean()) / target.std()
    assert relative_rms(p.temporal, target) <= 0.01


def test_wave_compose_identity_and_rank_additivity(wave):
    f, m, p = wave
    assert relative_rms(compose(p).values, f.values) <= 1e-6
    assert p.dimension == m.r_space + m.r_time - m.rank == 1


def test_separable_field():
    s = np.linspace(0.0, 2 * np.pi, 64)
    g = np.exp(-((s - np.pi) ** 2)) + 0.3 * np.sin(s)
    h = np.sin(np.arange(256) * 0.05) + 0.4 * np.cos(2.3 * np.arange(256) * 0.05) + 0.5
    f = _separable(g, h)
    m = estimate_coevolution(f)
    assert m.rank == 0
    p = decompose(f, m)
    assert abs(np.corrcoef(p.spatial[0], g)[0, 1]) >= 0.999
    assert abs(np.corrcoef(p.temporal, h)[0, 1]) >= 0.999
    assert relative_rms(compose(p).values, f.values) <= 1e-10
    assert (m.r_space, m.r_time) == (1, 1)
    assert p.dimension == m.r_space + m.r_time - m.rank == 2


def test_standing_wave_is_separable():
    s = np.linspace(0.0, 4 * np.pi, 128)
    t = np.arange(300) * 0.05
    f = _separable(np.cos(s), np.cos(0.5 * t))
    assert estimate_coevolution(f).rank == 0


def test_separable_scenario_round_trip():
    _, f, _ = generate(Scenario("separable"))
    p = decompose(f)
    assert p.manifold.rank == 0
    assert relative_rms(compose(p).values, f.values) <= 1e-10


def test_constant_field_structures_constant():
    f = SpatioTemporalField(Grid([0.0, 1.0], np.linspace(0, 10, 8)), TimeAxis.regular(20), np.full((20, 2, 8), 3.0))
    with pytest.warns(RuntimeWarning, match="flat"):
        p = decompose(f)
    assert np.ptp(p.spatial) == 0 and np.ptp(p.temporal) == 0
    assert np.allclose(compose(p).values, 3.0)


def test_full_basis_retrieval_is_contraction():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(30, 12))
    assert np.allclose(retrieval_product(a, SubspaceBasis.full("space", 12)), a.mean(axis=0))
    assert np.allclose(retrieval_product(a, SubspaceBasis.full("time", 30)), a.mean(axis=1))


def test_rank_zero_retrieval_equals_direct_projection():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(30, 12, 2))
    b = SubspaceBasis.from_data(rng.normal(size=(5, 12)), "space")
    direct = b.vectors @ (b.vectors.T @ a.mean(axis=0))
    m = CoevolutionManifold.separable((3, 4), 1, 1)
    assert np.max(np.abs(retrieval_product(a, b, m) - direct)) <= 1e-12


def test_retrieval_is_not_commutative():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(40, 6)) @ np.diag([3, 1, 1, 0.5, 0.2, 0.1])
    b = rng.normal(size=(40, 6)) + np.linspace(0, 1, 6)
    ab = retrieval_product(a, SubspaceBasis.from_data(b, "space", rank=2))
    ba = retrieval_product(b, SubspaceBasis.from_data(a, "space", rank=2))
    assert not np.allclose(ab, ba)


def test_basis_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        SubspaceBasis("space", np.ones((3, 2)))
    with pytest.raises(ValueError, match="label"):
        SubspaceBasis("both", np.eye(2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_compose_inverts_decompose_on_low_rank_fields(seed, rank):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(rank, 3, 6))
    h = rng.normal(size=(40, rank))
    vals = np.einsum("tr,rij->tij", h, g)
    f = SpatioTemporalField(Grid(np.linspace(-5, 5, 3), np.linspace(0, 10, 6)), TimeAxis.regular(40), vals)
    p = decompose(f, CoevolutionManifold.separable((3, 6), 2, 1))
    assert relative_rms(compose(p).values, f.values) <= 1e-10
