"""
Ground-truth generators and brute-force oracles.

Every generator is deterministic given its seed.  Sources are returned
standardized; observed fields carry the generating parameters in a
metadata dictionary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

from .field import Grid, SpatioTemporalField, TimeAxis, field_series, series_field
from .infostats import anamorphosis
from .numdiff import multisets

KINDS = ("linear-mixture", "nonlinear-mixture", "traveling-wave", "separable", "polynomial-link", "chaotic-source")

DEFAULTS = {
    "linear-mixture": {"n": 5000, "phi1": 0.97, "phi2": 0.85, "rate": 0.1, "kick_min": 1.0, "noise": 0.01, "n_obs": 3},
    "nonlinear-mixture": {"n": 5000, "noise": 0.01, "dt": 0.05, "quad": 0.1},
    "traveling-wave": {"omega": 2.0, "v": 0.5, "n_space": 256, "n_time": 512, "dt": 0.05, "periods": 4.0},
    "separable": {"n_space": 64, "n_lat": 8, "n_time": 256, "dt": 0.05},
    "polynomial-link": {"n": 5000, "phi": 0.9, "rate": 0.05, "c1": 0.0, "c2": 1.0, "c3": 0.0, "noise": 0.0, "n_lat": 4, "n_lon": 5},
    "chaotic-source": {"n": 100000, "r": 4.0},
}


def _std(x):
    x = np.asarray(x, dtype=float)
    return (x - x.mean(axis=0)) / x.std(axis=0)


# ---------------------------------------------------------------------------
# Elementary processes


def shot_noise_ar1(
    n: int,
    phi: float,
    rate: float,
    rng: np.random.Generator,
    symmetric: bool = False,
    burn: int = 200,
    min_kick: float = 0.0,
    standardize: bool = True,
) -> np.ndarray:
    """AR(1) relaxation driven by sparse random kicks, standardized.

    ``x_t = phi x_{t-1} + J_t`` with ``J_t`` nonzero with probability
    ``rate``; kicks are exponential (or Laplace when ``symmetric``).  Between
    kicks the series is smooth, so its tendency is a clean function of the
    state.
    """
    if not 0 < phi < 1 or not 0 < rate <= 1:
        raise ValueError("need 0 < phi < 1 and 0 < rate <= 1")
    m = n + burn
    hit = rng.random(m) < rate
    amp = rng.laplace(0.0, 1.0, m) if symmetric else rng.exponential(1.0, m)
    amp = np.sign(amp) * (np.abs(amp) + min_kick)
    kicks = np.where(hit, amp, 0.0)
    x = np.empty(m)
    x[0] = 0.0
    for t in range(1, m):
        x[t] = phi * x[t - 1] + kicks[t]
    return _std(x[burn:]) if standardize else x[burn:]


def logistic_map(n: int, r: float = 4.0, x0: float | None = None, rng: np.random.Generator | None = None, burn: int = 100) -> np.ndarray:
    """Orbit of ``x -> r x (1 - x)`` (not standardized)."""
    if not 0 < r <= 4:
        raise ValueError("logistic parameter r must lie in (0, 4]")
    if x0 is None:
        x0 = 0.1 + 0.8 * (rng or np.random.default_rng(0)).random()
    x = np.empty(n + burn)
    x[0] = x0
    for t in range(1, n + burn):
        x[t] = r * x[t - 1] * (1.0 - x[t - 1])
        # the floating-point orbit can land on the fixed point 0; nudge it off
        if x[t] <= 0.0 or x[t] >= 1.0:
            x[t] = 0.5 + 0.25 * math.sin(t)
    return x[burn:]


def logistic_lyapunov(orbit: np.ndarray, r: float = 4.0) -> float:
    """Lyapunov exponent of the logistic map along an orbit: mean of ``ln|r (1 - 2x)|``."""
    return float(np.mean(np.log(np.abs(r * (1.0 - 2.0 * np.asarray(orbit))))))


def _rk4(f, x0, dt, n, substeps=1):
    x = np.array(x0, dtype=float)
    out = np.empty((n,) + x.shape)
    h = dt / substeps
    for t in range(n):
        out[t] = x
        for _ in range(substeps):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


def lorenz_x(n: int, dt: float, rng: np.random.Generator, burn: int = 2000) -> np.ndarray:
    """x-component of the Lorenz-63 system sampled every ``dt``, standardized."""

    def rhs(s):
        return np.array([10.0 * (s[1] - s[0]), s[0] * (28.0 - s[2]) - s[1], s[0] * s[1] - 8.0 / 3.0 * s[2]])

    x0 = np.array([1.0, 1.0, 20.0]) + rng.normal(size=3)
    traj = _rk4(rhs, x0, dt, n + burn, substeps=5)
    return _std(traj[burn:, 0])


def quasi_periodic(n: int, f1: float = 0.0123, f2: float = 0.0347, phase: float = 0.0) -> np.ndarray:
    t = np.arange(n)
    return _std(np.sin(2 * np.pi * f1 * t + phase) + np.sin(2 * np.pi * f2 * t))


def traveling_wave(omega: float = 2.0, v: float = 0.5, n_space: int = 256, n_time: int = 512, dt: float = 0.05, periods: float = 4.0):
    """Wave ``cos(s - v t)`` expressed in the comoving frame ``s -> s - omega t``.

    In grid coordinates the field is ``cos(kappa (s - omega t))`` with
    ``kappa = 1 - v / omega``, so it travels at celerity ``omega`` and the
    record at ``s = 0`` is the canonic ``cos((omega - v) t)``.  The longitude
    axis spans ``periods`` wavelengths including both end points; two
    identical latitude rows keep the grid two-dimensional.
    """
    if omega <= 0 or not 0 <= v < omega:
        raise ValueError("need omega > 0 and 0 <= v < omega")
    kappa = 1.0 - v / omega
    length = periods * 2 * np.pi / kappa
    s = np.linspace(0.0, length, n_space)
    t = np.arange(n_time) * dt
    w = np.cos(kappa * (s[None, :] - omega * t[:, None]))
    vals = np.broadcast_to(w[:, None, :], (n_time, 2, n_space))
    return SpatioTemporalField(Grid([0.0, 1.0], s), TimeAxis(t), vals)


# ---------------------------------------------------------------------------
# Polynomial systems and exact interaction oracle


@dataclass(frozen=True)
class PolynomialSystem:
    """Explicit polynomial right-hand side ``xdot_j = sum_e c_je x^e``.

    ``terms[j]`` maps exponent tuples (length ``dim``) to coefficients.
    """

    dim: int
    terms: tuple

    def __post_init__(self):
        for t in self.terms:
            for e in t:
                if len(e) != self.dim or min(e) < 0:
                    raise ValueError(f"bad exponent {e}")
                if sum(e) > 6:
                    raise ValueError("polynomial degree above 6")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (len(self.terms),))
        for j, t in enumerate(self.terms):
            for e, c in t.items():
                out[..., j] += c * np.prod(x ** np.array(e), axis=-1)
        return out

    def derivative(self, x: np.ndarray, alpha) -> np.ndarray:
        """Exact partial derivative of multi-index ``alpha`` of every response."""
        x = np.asarray(x, dtype=float)
        alpha = np.asarray(alpha)
        out = np.zeros(x.shape[:-1] + (len(self.terms),))
        for j, t in enumerate(self.terms):
            for e, c in t.items():
                e = np.asarray(e)
                if np.any(e < alpha):
                    continue
                fac = np.prod([math.factorial(int(a)) // math.factorial(int(a - b)) for a, b in zip(e, alpha)])
                out[..., j] += c * fac * np.prod(x ** (e - alpha), axis=-1)
        return out

    def integrate(self, x0, dt: float, n: int, substeps: int = 1) -> np.ndarray:
        return _rk4(self, x0, dt, n, substeps)


def driven_predictand(
    n: int = 20000,
    phis=(0.9, 0.8),
    coefficients=((0.0, 0.0), (0.5, -0.3), (0.2, 0.1), (-0.05, 0.04)),
    rate: float = 0.05,
    min_kick: float = 1.0,
    seed: int = 0,
    symmetric: bool = True,
):
    """Sources with known diagonal dynamics and a predictand driven by them.

    Each source is shot noise (symmetric kicks by default) whose
    standardized value decays between kicks
    as ``dx_i/dt = ln(phi_i) (x_i + mu_i / sd_i)``.  The predictand obeys
    ``dz/dt = sum_k sum_i a[k, i] x_i^k`` (``a[0]`` summed as the constant)
    and is integrated exactly between kicks by 16-point Gauss-Legendre
    quadrature over each unit step.  The predictand is placed on the
    identical-cell grid of :func:`~dsa.field.series_field`.  Returns ``(sources, predictand,
    metadata)`` with the true ``N_k = k! a_k`` and self-dynamics.
    """
    rng = np.random.default_rng(seed)
    phis = np.asarray(phis, dtype=float)
    a = np.asarray(coefficients, dtype=float)
    if a.ndim != 2 or a.shape[1] != phis.size:
        raise ValueError("coefficients must have shape (order + 1, n_sources)")
    raw = np.column_stack([shot_noise_ar1(n, p, rate, rng, symmetric, min_kick=min_kick, standardize=False) for p in phis])
    mu, sd = raw.mean(axis=0), raw.std(axis=0)
    xs = (raw - mu) / sd
    nodes, wts = np.polynomial.legendre.leggauss(16)
    s = 0.5 * (nodes + 1.0)
    wts = 0.5 * wts
    # standardized state inside each step: (raw_t phi^s - mu) / sd
    inner = (raw[:-1, None, :] * phis[None, None, :] ** s[None, :, None] - mu) / sd

    def rate_of(x):
        out = np.full(x.shape[:-1], float(np.sum(a[0])))
        for k in range(1, a.shape[0]):
            out = out + (x**k) @ a[k]
        return out

    incr = rate_of(inner) @ wts
    z = np.concatenate([[0.0], np.cumsum(incr)])
    lam = np.zeros((phis.size, 2))
    lam[:, 0] = np.log(phis) * mu / sd
    lam[:, 1] = np.log(phis)
    fact = np.array([math.factorial(k) for k in range(a.shape[0])], dtype=float)
    meta = {"N": a * fact[:, None], "self_dynamics": lam, "phis": phis, "mu": mu, "sd": sd}
    return series_field(xs), series_field(z[:, None]), meta


def brute_force_interaction(system: PolynomialSystem, k: int, x: np.ndarray):
    """Exact order-k interaction tensors of a polynomial system at states ``x``.

    Returns an :class:`~dsa.interaction.InteractionTensor` with per-sample
    entries indexed by :func:`~dsa.numdiff.multisets` and the
    inverse-speed aggregate.
    """
    from .interaction import InteractionTensor, reference_weights

    x = np.atleast_2d(np.asarray(x, dtype=float))
    ms = multisets(system.dim, k)
    per = np.empty((x.shape[0], len(system.terms), len(ms)))
    for m, s in enumerate(ms):
        alpha = np.bincount(np.asarray(s, dtype=int), minlength=system.dim)
        per[:, :, m] = system.derivative(x, alpha)
    w = reference_weights(system(x))
    diag = tuple(range(len(system.terms))) if len(system.terms) == system.dim else (-1,) * len(system.terms)
    return InteractionTensor(k, system.dim, len(system.terms), np.einsum("n,nrm->rm", w, per), per, w, np.arange(x.shape[0]), diag)


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class Scenario:
    kind: str
    parameters: Mapping = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        unknown = set(self.parameters) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameter(s) for {self.kind}: {', '.join(sorted(unknown))}")

    def param(self, name):
        return self.parameters.get(name, DEFAULTS[self.kind][name])


def _mixing_matrix(n_obs: int, m: int, rng) -> np.ndarray:
    a = rng.normal(size=(n_obs, m))
    # keep the mixing well conditioned
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return u @ np.diag(np.linspace(1.0, 0.6, m)) @ vt


def generate(scn: Scenario):
    """Generate ``(truth, observed, metadata)`` for a scenario.

    ``truth`` is the field of true sources (``None`` for pure space-time
    scenarios), ``observed`` the field to analyse.
    """
    rng = np.random.default_rng(scn.seed)
    p = scn.param
    meta = {"kind": scn.kind, "seed": scn.seed, **{k: p(k) for k in DEFAULTS[scn.kind]}}
    if scn.kind == "linear-mixture":
        n, n_obs = int(p("n")), int(p("n_obs"))
        if n < 200 or n_obs < 2 or p("noise") < 0:
            raise ValueError("linear-mixture needs n >= 200, n_obs >= 2, noise >= 0")
        x = np.column_stack(
            [shot_noise_ar1(n, p(f"phi{i}"), p("rate"), rng, min_kick=p("kick_min")) for i in (1, 2)]
        )
        a = _mixing_matrix(n_obs, 2, rng)
        y = x @ a.T + p("noise") * rng.normal(size=(n, n_obs))
        meta["mixing"] = a
        return series_field(x), series_field(y), meta
    if scn.kind == "nonlinear-mixture":
        n = int(p("n"))
        if n < 200 or p("noise") < 0:
            raise ValueError("nonlinear-mixture needs n >= 200 and noise >= 0")
        x1 = _std(logistic_map(n, 4.0, rng=rng))
        x2 = lorenz_x(n, p("dt"), rng)
        x = np.column_stack([x1, x2])
        y3 = _std(x1 * x2 + p("quad") * x2**2)
        y = np.column_stack([x1, x2, y3]) + p("noise") * rng.normal(size=(n, 3))
        return series_field(x), series_field(y), meta
    if scn.kind == "traveling-wave":
        f = traveling_wave(p("omega"), p("v"), int(p("n_space")), int(p("n_time")), p("dt"), p("periods"))
        meta["canonic_frequency"] = p("omega") - p("v")
        return None, f, meta
    if scn.kind == "separable":
        ns, nl, nt = int(p("n_space")), int(p("n_lat")), int(p("n_time"))
        s = np.linspace(0.0, 2 * np.pi, ns)
        lat = np.linspace(-30.0, 30.0, nl)
        t = np.arange(nt) * p("dt")
        g = np.exp(-((s - np.pi) ** 2)) + 0.3 * np.sin(s)
        gl = 1.0 + 0.2 * np.cos(np.deg2rad(lat))
        h = np.sin(t) + 0.4 * np.cos(2.3 * t) + 0.5
        vals = h[:, None, None] * gl[None, :, None] * g[None, None, :]
        return None, SpatioTemporalField(Grid(lat, s), TimeAxis(t), vals), meta
    if scn.kind == "polynomial-link":
        n = int(p("n"))
        x1 = shot_noise_ar1(n, p("phi"), p("rate"), rng, symmetric=True)
        nl, no = int(p("n_lat")), int(p("n_lon"))
        z = p("c1") * x1 + p("c2") * x1**2 + p("c3") * x1**3
        vals = np.broadcast_to(z[:, None, None], (n, nl, no)) + p("noise") * rng.normal(size=(n, nl, no))
        grid = Grid(np.linspace(-20.0, 20.0, nl), np.linspace(0.0, 40.0, no))
        return series_field(x1), SpatioTemporalField(grid, TimeAxis.regular(n), vals), meta
    n = int(p("n"))
    orbit = logistic_map(n, p("r"), rng=rng)
    meta["lyapunov"] = logistic_lyapunov(orbit, p("r"))
    return series_field(_std(orbit)), series_field(_std(orbit)), meta


# ---------------------------------------------------------------------------
# Recovery scoring


@dataclass(frozen=True)
class Recovery:
    """Pairing of recovered to true sources.

    ``pairs[i] = (true_index, recovered_index)``; ``scores`` are |corr|
    after anamorphosis and ``signs`` the sign aligning each recovered
    source with its partner.
    """

    pairs: tuple
    scores: np.ndarray
    signs: np.ndarray
    corr: np.ndarray


def _as_series(x) -> np.ndarray:
    if isinstance(x, SpatioTemporalField):
        return field_series(x)
    if hasattr(x, "sources"):
        return field_series(x.sources)
    a = np.asarray(x, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def score_recovery(truth, recovered) -> Recovery:
    """Optimal assignment of recovered to true sources on |corr| of normal scores."""
    t = _as_series(truth)
    r = _as_series(recovered)
    if t.shape[0] != r.shape[0]:
        raise ValueError("truth and recovered sources have different lengths")
    zt = anamorphosis(t)
    zr = anamorphosis(r)
    c = (zt - zt.mean(0)).T @ (zr - zr.mean(0)) / zt.shape[0] / np.outer(zt.std(0), zr.std(0))
    rows, cols = linear_sum_assignment(-np.abs(c))
    scores = np.abs(c[rows, cols])
    signs = np.sign(c[rows, cols])
    return Recovery(tuple(zip(rows.tolist(), cols.tolist())), scores, signs, c)
