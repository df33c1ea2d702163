"""End-to-end acceptance criteria, one test per criterion.

Each test records a single pass/fail line; the lines are printed as they
happen and again in the terminal summary.
"""

import time
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import kstest

from dsa.cli import EXIT_OK, main
from dsa.core import ExtractionConfig, extract_sources, nu_values, observable_matrix, offdiag_null
from dsa.dynsim import ModelConfig, fit_model, initialize, integrate, observation_quantiles, simulate
from dsa.field import Grid, SpatioTemporalField, TimeAxis, write_field, series_field
from dsa.infostats import interaction_information, negentropy
from dsa.numdiff import time_derivative_array
from dsa.predictability import predictability_map
from dsa.spacetime import compose, decompose, estimate_coevolution, relative_rms
from dsa.synthetic import Scenario, driven_predictand, generate, score_recovery, shot_noise_ar1, traveling_wave

UNIFORM_J = 0.5 * np.log(2 * np.pi * np.e / 12.0)


@pytest.fixture(scope="module")
def mixtures():
    out = {}
    for kind, tkind in (("linear-mixture", "linear"), ("nonlinear-mixture", "polynomial")):
        truth, obs, _ = generate(Scenario(kind))
        t0 = time.perf_counter()
        s = extract_sources(obs, ExtractionConfig(kind=tkind))
        out[kind] = (truth, obs, s, time.perf_counter() - t0)
    return out


def test_criterion_01_traveling_wave(verdict):
    t0 = time.perf_counter()
    f = traveling_wave(2.0, 0.5)
    m = estimate_coevolution(f)
    p = decompose(f, m)
    elapsed = time.perf_counter() - t0
    speed_err = abs(m.phase_speed("lon") - 2.0) / 2.0
    t = f.time.timestamps
    target = np.cos(1.5 * t)
    target = (target - target.mean()) / target.std()
    rms = relative_rms(p.temporal, target)
    ok = speed_err <= 0.01 and rms <= 0.01 and elapsed < 10.0
    verdict(1, "traveling-wave canonics", ok, f"celerity err {speed_err:.2e}, cos(1.5t) rms {rms:.2e}, {elapsed:.2f} s")


def test_criterion_02_source_recovery(mixtures, verdict):
    details, ok = [], True
    for kind, (truth, obs, s, elapsed) in mixtures.items():
        rec = score_recovery(truth, s.retained_sources()) if s.retained.any() else None
        scores = rec.scores if rec is not None else np.zeros(2)
        Y, _ = observable_matrix(obs)
        Ys = (Y - Y.mean(0)) / Y.std(0)
        raw = nu_values(Ys, obs.time.step, 1, shared_jumps=True)[0]
        ratio = s.nu[0] / raw
        n_ret = int(s.retained.sum())
        ok &= bool(np.all(scores >= 0.95) and scores.size == 2 and ratio <= 0.1 and n_ret == 2 and elapsed < 120)
        details.append(f"{kind}: scores {np.round(scores, 3).tolist()}, nu1 ratio {ratio:.3f}, retained {n_ret}, {elapsed:.0f} s")
    verdict(2, "source recovery", ok, "; ".join(details))


def test_criterion_03_diagonalization(mixtures, verdict):
    details, ok = [], True
    for i, (kind, (_, obs, s, _)) in enumerate(mixtures.items()):
        x = s.retained_sources()
        nu = np.array(nu_values(x, obs.time.step, 3))
        q95 = np.quantile(offdiag_null(x, obs.time.step, 3, shuffles=100, seed=i), 0.95, axis=0)
        ok &= bool(np.all(nu < q95))
        details.append(f"{kind}: nu {np.round(nu, 4).tolist()} < q95 {np.round(q95, 4).tolist()}")
    verdict(3, "diagonalization", ok, "; ".join(details))


def test_criterion_04_negentropy(verdict):
    rng = np.random.default_rng(2024)
    small = sum(abs(negentropy(rng.normal(size=(10_000, 2)), shuffles=0).value) <= 0.01 for _ in range(100))
    uni = negentropy(rng.uniform(size=10_000), shuffles=0).value
    ok = small >= 95 and abs(uni - UNIFORM_J) <= 0.02
    verdict(4, "negentropy calibration", ok, f"{small}/100 Gaussian trials within 0.01 nat, uniform J {uni:.4f} vs {UNIFORM_J:.4f}")


def test_criterion_05_interaction_information(verdict):
    rng = np.random.default_rng(5)
    n = 5000
    xa, xb = rng.normal(size=(2, n))
    syn = interaction_information(xa, xb, xa + xb, shuffles=200, seed=1)
    c = rng.normal(size=n)
    # three noisy copies of a common driver share the same information
    red = interaction_information(c + 0.3 * xa, c + 0.3 * xb, c + 0.3 * rng.normal(size=n), shuffles=200, seed=2)
    ya = xa
    yb = 0.4 * xa + xb
    gy = ya - 0.5 * yb + rng.normal(size=n)
    g = interaction_information(ya, yb, gy, shuffles=0, seed=3)
    agree = abs(g.value - g.extra["conditional_form"]) <= 2 * g.extra["standard_error"]
    ok = syn.value > syn.mc_null_q95 and red.value < -red.mc_null_q95 and agree
    verdict(
        5,
        "interaction-information signs",
        ok,
        f"synergy {syn.value:.3f} > {syn.mc_null_q95:.3f}, redundancy {red.value:.3f} < -{red.mc_null_q95:.3f}, forms agree {agree}",
    )


def test_criterion_06_compose_decompose(verdict):
    _, sep, _ = generate(Scenario("separable"))
    ps = decompose(sep)
    wave = traveling_wave(2.0, 0.5)
    pw = decompose(wave)
    r_sep = relative_rms(compose(ps).values, sep.values)
    r_wave = relative_rms(compose(pw).values, wave.values)
    adds = all(p.dimension == p.manifold.r_space + p.manifold.r_time - p.manifold.rank for p in (ps, pw))
    ok = r_sep <= 1e-10 and r_wave <= 1e-6 and adds and ps.manifold.rank == 0 and pw.manifold.rank == 1
    verdict(6, "compose/decompose identity", ok, f"separable {r_sep:.1e}, wave {r_wave:.1e}, d = r_s + r_t - c {adds}")


def test_criterion_07_derivatives(verdict):
    h = 0.1
    t = np.arange(41) * h
    d5 = time_derivative_array(t**5, h, 5, detect=False).derivs[4, 0, :, 0]
    rel = np.max(np.abs(d5 - 120.0)) / 120.0
    steps = [0.08, 0.04, 0.02]
    errs = []
    for s in steps:
        u = np.arange(-100, 101) * s
        errs.append(abs(time_derivative_array(np.sin(u), s, 1, detect=False).derivs[0, 0, 100, 0] - 1.0))
    order = np.polyfit(np.log(steps), np.log(errs), 1)[0]
    ok = rel <= 1e-6 and order >= 4
    verdict(7, "derivative accuracy", ok, f"t^5 fifth derivative rel err {rel:.1e}, sin order {order:.2f}")


def test_criterion_08_predictability(verdict):
    rng = np.random.default_rng(1)
    n = 5000
    x = np.column_stack([shot_noise_ar1(n, 0.9, 0.05, rng, True), shot_noise_ar1(n, 0.8, 0.05, rng, True)])
    grid = Grid(np.linspace(-20, 20, 4), np.linspace(0, 40, 5))

    def uniform(z):
        return SpatioTemporalField(grid, TimeAxis.regular(n), np.broadcast_to(z[:, None, None], (n, 4, 5)))

    ident = predictability_map(x, uniform(x[:, 0]), 1, shuffles=200)
    dev = float(np.max(np.abs(np.abs(ident.raw[0]) - 1.0)))
    sq = uniform(x[:, 0] ** 2)
    p1 = predictability_map(x, sq, 1, shuffles=1000)
    p2 = predictability_map(x, sq, 2, shuffles=1000)
    gap = ~p1.above_null[0]
    recovered = bool(gap.any() and np.all(p2.effective[0][gap] > p2.null_q95[0][gap]))
    Z = np.stack([shot_noise_ar1(n, 0.85, 0.05, rng, True) for _ in range(400)], axis=1).reshape(n, 20, 20)
    big = Grid(np.linspace(-20, 20, 20), np.linspace(0, 40, 20))
    pn = predictability_map(x, SpatioTemporalField(big, TimeAxis.regular(n), Z), 1, shuffles=1000)
    fp = float(np.mean(pn.effective > pn.null_q95))
    ok = dev <= 1e-6 and recovered and abs(fp - 0.05) <= 0.02
    verdict(8, "predictability maps", ok, f"|N1| - 1 = {dev:.1e}, order 2 recovers order-1 gap {recovered}, false positives {fp:.3f}")


def test_criterion_09_simulation(verdict):
    x, z, meta = driven_predictand(seed=0)
    ref = fit_model(x, z, q=3)
    cfg = ModelConfig(q=3, ensemble_size=200, horizon=100, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        init = initialize(ref, cfg)
        ens = simulate(ref, init, cfg)
    coef = np.zeros_like(ref.coefficients)
    coef[:4] = (meta["N"] / ref.z_scale[0])[:, :, None]
    lam = np.zeros_like(ref.self_dynamics)
    lam[:, :2] = meta["self_dynamics"]
    truth = replace(ref, coefficients=coef, self_dynamics=lam)
    _, zo, _ = integrate(truth, init.states, init.predictand, 100, substeps=100)
    ms = np.median(ens.trajectories[:, :, 0], axis=0)
    mo = np.median(zo[:, :, 0], axis=0)
    # error relative to how far the oracle median moves
    fidelity = float(np.sqrt(np.mean((ms - mo) ** 2)) / np.sqrt(np.mean((mo - mo[0]) ** 2)))

    ranks = []
    for trial in range(100):
        c = ModelConfig(q=3, ensemble_size=201, horizon=100, seed=1000 + trial)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            e = simulate(ref, initialize(ref, c), c)
        s = e.series()
        held = int(np.random.default_rng(trial).integers(s.shape[0]))
        others = np.delete(s, held, axis=0)
        ranks.append(observation_quantiles(others, s[held])[-1])
    ks_p = float(kstest(ranks, "uniform").pvalue)

    # degree-6 truth against its own q = 5 truncation over an amplitude sweep
    six = np.zeros((7,) + ref.coefficients.shape[1:])
    six[:4] = coef
    six[6, 0] = 0.5
    deg6 = replace(ref, q=6, coefficients=six)
    trunc = replace(ref, q=5, coefficients=six[:6].copy())
    amps = np.geomspace(0.1, 0.8, 8)
    errs = []
    for a in amps:
        x0 = np.array([[a, 0.0]])
        z0 = np.zeros((1, ref.n_cells))
        _, z6, _ = integrate(deg6, x0, z0, 5)
        _, z5, _ = integrate(trunc, x0, z0, 5)
        errs.append(np.max(np.abs(z6[0, -1] - z5[0, -1])))
    slope = float(np.polyfit(np.log(amps), np.log(errs), 1)[0])
    ok = fidelity <= 0.01 and ks_p > 0.05 and abs(slope - 6.0) <= 0.5
    verdict(9, "simulation fidelity", ok, f"median rms {fidelity:.4f} of departure, rank KS p {ks_p:.3f}, truncation slope {slope:.3f}")


def test_criterion_10_reproducibility(tmp_path, verdict):
    def tree(d):
        return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    def run(cmd, cfg, out):
        return main([cmd, "--config", str(cfg), "--out", str(out)])

    (tmp_path / "synth.ini").write_text("[run]\nseed = 3\n[synth]\nkind = polynomial-link\nn = 3000\n")
    codes = [run("synth", tmp_path / "synth.ini", tmp_path / "pl")]
    (tmp_path / "extract.ini").write_text("[extract]\ninput = pl/observed.txt\nrestarts = 4\nshuffles = 50\nnegentropy_shuffles = 50\n")
    write_field(series_field(np.zeros((11, 1))), tmp_path / "obs.txt")
    (tmp_path / "simulate.ini").write_text(
        "[simulate]\nsources = pl/truth.txt\npredictand = pl/observed.txt\nobs = obs.txt\nq = 3\nensemble = 100\nhorizon = 10\nshuffles = 20\n"
    )
    same = {}
    for cmd in ("synth", "extract", "simulate"):
        if cmd != "synth":
            codes.append(run(cmd, tmp_path / f"{cmd}.ini", tmp_path / cmd))
        first = tmp_path / ("pl" if cmd == "synth" else cmd)
        codes.append(run(cmd, first / "manifest.ini", tmp_path / f"{cmd}-rerun"))
        same[cmd] = tree(first) == tree(tmp_path / f"{cmd}-rerun")
    ok = all(c == EXIT_OK for c in codes) and all(same.values())
    verdict(10, "reproducibility", ok, ", ".join(f"{k} bit-identical {v}" for k, v in same.items()))
