"""
Dynamic simulation of a predictand from its sources.

The predictand tendency in every cell is modelled as a truncated power
series of the sources, ``dP/dt = sum_{k=0}^{q} (1/k!) N_k . X^k``, with one
coefficient per source and order (``X^k`` taken elementwise).  The sources
follow their own diagonal polynomial dynamics ``dX_i/dt = sum_k (1/k!)
Lambda_{k,i} X_i^k``.  Coefficients are aggregated over the reference
manifold by a global regression with inverse-speed weights, so they are
linear functionals of the tendency and their cyclic-shift null is cheap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import SpatioTemporalField, TimeAxis, _atomic_write_text, _fmt, field_series
from .infostats import seeds_for
from .interaction import reference_weights
from .numdiff import RegressionError, detect_jumps, time_derivative_array

BLOWUP = 1e6
QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)
MIN_MEMBERS = 100


@dataclass(frozen=True)
class ModelConfig:
    """Truncation order, ensemble size, horizon and initialization controls.

    ``perturbation`` is the rms size of the initial perturbation in
    standardized source units and ``concentration`` the factor by which the
    Lyapunov spectrum is stretched about its mean before it sets the
    perturbation weights.
    """

    q: int = 5
    ensemble_size: int = 200
    horizon: int = 100
    seed: int = 0
    beta: int = 5
    perturbation: float = 0.1
    concentration: float = 1.0
    shuffles: int = 200

    def __post_init__(self):
        if not 1 <= self.beta <= 6:
            raise ValueError("beta must lie in 1..6")
        if not 1 <= self.q <= self.beta:
            raise ValueError(f"truncation q={self.q} must satisfy 1 <= q <= beta={self.beta}")
        if self.ensemble_size < MIN_MEMBERS:
            raise ValueError(f"ensemble_size must be at least {MIN_MEMBERS} for stable quantiles")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.perturbation < 0 or self.concentration < 0 or self.shuffles < 0:
            raise ValueError("perturbation, concentration and shuffles must be nonnegative")


@dataclass(frozen=True, eq=False)
class ReferenceManifold:
    """Fitted truncated model.

    Attributes
    ----------
    coefficients : array (q + 1, m, n_cells)
        Effective coefficients ``N_k`` (raw minus null mean); order 0 is
        stored once per cell in ``coefficients[0, 0]`` and zero elsewhere.
    raw, null_mean, null_q95 : arrays like ``coefficients``
        Raw aggregates and the cyclic-shift null (``null_q95`` of the
        absolute value).
    self_dynamics : array (m, q + 1)
        ``Lambda_{k,i}`` of the diagonal source dynamics.
    lyapunov : array (m,)
        Orbit-mean growth rates ``d(dX_i/dt)/dX_i``, sorted descending.
    energy_form : array (m, m)
        Positive-definite form ``phi(x) = x^T Q x``.
    states, predictand : arrays
        Reference samples of the sources ``(n, m)`` and the standardized
        predictand ``(n, n_cells)`` from which initial members are drawn,
        with sampling ``weights``.
    """

    q: int
    coefficients: np.ndarray
    raw: np.ndarray
    null_mean: np.ndarray
    null_q95: np.ndarray
    self_dynamics: np.ndarray
    lyapunov: np.ndarray
    lyapunov_order: np.ndarray
    energy_form: np.ndarray
    states: np.ndarray
    predictand: np.ndarray
    weights: np.ndarray
    step: float
    z_mean: np.ndarray
    z_scale: np.ndarray
    grid: object = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefficients)) or not np.all(np.isfinite(self.self_dynamics)):
            raise ValueError("model coefficients are not finite")
        if np.any(np.diff(self.lyapunov) > 0):
            raise ValueError("Lyapunov spectrum must be sorted descending")

    @property
    def n_sources(self) -> int:
        return self.self_dynamics.shape[0]

    @property
    def n_cells(self) -> int:
        return self.coefficients.shape[2]

    @property
    def physical_coefficients(self) -> np.ndarray:
        """Effective coefficients in the predictand's original units."""
        return self.coefficients * self.z_scale

    @property
    def significant(self) -> np.ndarray:
        return np.abs(self.raw) > self.null_q95

    def source_rate(self, x: np.ndarray) -> np.ndarray:
        """``dX/dt`` for states ``x`` of shape ``(..., m)``."""
        return _diag_rate(x, self.self_dynamics)

    def predictand_rate(self, x: np.ndarray) -> np.ndarray:
        """``dP/dt`` per cell for states ``x`` of shape ``(..., m)``."""
        return _power_series(x, self.coefficients)

    def to_text(self) -> str:
        lines = [f"q {self.q}", f"m {self.n_sources}", f"cells {self.n_cells}", f"step {_fmt(self.step)}"]
        lines.append("lyapunov " + " ".join(_fmt(v) for v in self.lyapunov))
        for i in range(self.n_sources):
            lines.append(f"self {i} " + " ".join(_fmt(v) for v in self.self_dynamics[i]))
        for i in range(self.n_sources):
            lines.append(f"energy {i} " + " ".join(_fmt(v) for v in self.energy_form[i]))
        lines.append("# k source cell effective raw null_mean null_q95")
        for k in range(self.q + 1):
            for i in range(self.n_sources if k else 1):
                for c in range(self.n_cells):
                    vals = (self.coefficients, self.raw, self.null_mean, self.null_q95)
                    lines.append(f"{k} {i} {c} " + " ".join(_fmt(a[k, i, c]) for a in vals))
        return "\n".join(lines) + "\n"


def _diag_rate(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for k in range(lam.shape[1]):
        out = out + lam[:, k] * x**k / math.factorial(k)
    return out


def _power_series(x: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """``sum_k (1/k!) sum_i coef[k, i, c] x_i^k`` for ``x (..., m)``."""
    out = np.broadcast_to(coef[0, 0], x.shape[:-1] + coef.shape[2:]).copy()
    for k in range(1, coef.shape[0]):
        out = out + (x**k) @ coef[k] / math.factorial(k)
    return out


def _design(x: np.ndarray, q: int) -> np.ndarray:
    """Columns ``1, x_1, ..., x_1^q, x_2, ..., x_m^q``."""
    cols = [np.ones(x.shape[0])]
    for i in range(x.shape[1]):
        for k in range(1, q + 1):
            cols.append(x[:, i] ** k)
    return np.column_stack(cols)


def power_fit_operator(x: np.ndarray, q: int, weights: np.ndarray) -> np.ndarray:
    """Weighted least-squares operator onto per-source powers.

    Returns ``L`` of shape ``(1 + m q, n)`` so that ``L @ y`` are the
    regression coefficients of ``y`` on :func:`_design` columns, multiplied
    by ``k!`` for order ``k`` (that is, the ``N_k``).
    """
    A = _design(x, q)
    if A.shape[0] < 3 * A.shape[1]:
        raise RegressionError(f"{A.shape[0]} samples cannot support {A.shape[1]} power terms")
    Aw = A * weights[:, None]
    G = A.T @ Aw
    d = np.sqrt(np.diag(G))
    d[d <= 0] = 1.0
    Gs = G / np.outer(d, d)
    cond = np.linalg.cond(Gs)
    if cond > 1e12:
        raise RegressionError(f"power-series regression is rank deficient (condition {cond:.2e})")
    L = np.linalg.solve(Gs, (Aw / d).T) / d[:, None]
    facts = [1.0] + [float(math.factorial(k)) for _ in range(x.shape[1]) for k in range(1, q + 1)]
    return L * np.asarray(facts)[:, None]


def _unpack(c: np.ndarray, m: int, q: int) -> np.ndarray:
    """Operator output ``(1 + m q, ...)`` to ``(q + 1, m, ...)``."""
    out = np.zeros((q + 1, m) + c.shape[1:])
    out[0, 0] = c[0]
    body = c[1:].reshape((m, q) + c.shape[1:])
    out[1:] = np.moveaxis(body, 1, 0)
    return out


def _null(L: np.ndarray, zd: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    n = zd.shape[0]
    corr = np.fft.irfft(np.conj(np.fft.rfft(zd, axis=0))[None] * np.fft.rfft(L, axis=1)[:, :, None], n=n, axis=1)
    return np.transpose(corr[:, shifts, :], (1, 0, 2))


def _sources(x) -> tuple[np.ndarray, np.ndarray | None]:
    q_form = None
    if hasattr(x, "retained_sources"):
        if x.physical is not None and x.physical.energy_form.shape[0] == int(np.sum(x.retained)):
            q_form = x.physical.energy_form
        x = x.retained_sources()
    elif isinstance(x, SpatioTemporalField):
        x = field_series(x)
    x = np.asarray(x, dtype=float)
    return (x[:, None] if x.ndim == 1 else x), q_form


def fit_model(x, z: SpatioTemporalField, q: int = 5, maps: dict | None = None, shuffles: int = 200, seed=0) -> ReferenceManifold:
    """Fit the truncated predictand model and the source self-dynamics.

    Parameters
    ----------
    x : DynamicSourceSet, SpatioTemporalField or array (n_time, m)
        Sources, standardized here.
    z : SpatioTemporalField
        Single-component predictand, filled.
    q : int
        Truncation order.
    maps : dict, optional
        Predictability maps keyed by order; when given, orders ``1..q``
        must all be present.
    """
    if maps is not None:
        missing = [k for k in range(1, q + 1) if k not in maps]
        if missing:
            raise ValueError(f"predictability maps missing for order(s) {missing}")
    xs, q_form = _sources(x)
    if z.has_missing:
        raise ValueError("predictand has missing values; run fill() first")
    if z.n_components != 1 or z.n_time != xs.shape[0]:
        raise ValueError("predictand must be single-component and share the sources' time axis")
    sd = xs.std(axis=0)
    if np.any(sd <= 0):
        raise ValueError("a source is constant")
    xs = (xs - xs.mean(axis=0)) / sd
    n, m = xs.shape
    step = z.time.step
    xjumps = detect_jumps(xs)
    tdx = time_derivative_array(xs[None], step, 1, jumps=xjumps)
    xdot = tdx.derivs[0, 0]
    zflat = z.values[0].reshape(n, -1)
    zmean = zflat.mean(axis=0)
    zscale = zflat.std(axis=0)
    zstd = np.where(zscale > 0, (zflat - zmean) / np.where(zscale > 0, zscale, 1.0), 0.0)
    jumps = detect_jumps(zstd) | xjumps.any(axis=1)[:, None]
    tdz = time_derivative_array(zstd[None], step, 1, jumps=jumps)
    valid = tdx.valid[0, 0].all(axis=1) & tdz.valid[0, 0].all(axis=1)
    zd = tdz.derivs[0, 0][valid]
    xv = xs[valid]
    w = reference_weights(xdot[valid])
    L = power_fit_operator(xv, q, w)
    raw = _unpack(L @ zd, m, q)
    if shuffles > 0:
        rng = seeds_for(seed, 1)[0]
        shifts = rng.integers(1, zd.shape[0], size=shuffles)
        null = np.stack([_unpack(s, m, q) for s in _null(L, zd, shifts)])
        nmean, nq95 = null.mean(axis=0), np.quantile(np.abs(null), 0.95, axis=0)
    else:
        nmean = np.zeros_like(raw)
        nq95 = np.full_like(raw, np.nan)
    # diagonal self-dynamics, one source at a time
    lam = np.zeros((m, q + 1))
    for i in range(m):
        Li = power_fit_operator(xv[:, i : i + 1], q, w)
        lam[i] = Li @ xdot[valid, i]
    slope = np.zeros_like(xv)
    for k in range(1, q + 1):
        slope += lam[:, k] * xv ** (k - 1) / math.factorial(k - 1)
    lyap = slope.mean(axis=0)
    order = np.argsort(-lyap, kind="stable")
    if q_form is None:
        from .core import _energy_form

        q_form = _energy_form(xv, xdot[valid])
    # the order-0 null mean is the tendency's own mean, not a bias
    nmean[0] = 0.0
    return ReferenceManifold(
        q,
        raw - nmean,
        raw,
        nmean,
        nq95,
        lam,
        lyap[order],
        order,
        q_form,
        xv,
        zstd[valid],
        w,
        step,
        zmean,
        zscale,
        z.grid,
    )


# ---------------------------------------------------------------------------
# Initialization


@dataclass(frozen=True, eq=False)
class InitialEnsemble:
    """Initial members: sources ``(M, m)``, predictand ``(M, n_cells)``.

    ``draws`` are the unperturbed reference states, ``perturbations`` the
    raw perturbation vectors before energy rescaling, and ``spectrum`` the
    concentrated Lyapunov spectrum that set their weights.
    """

    states: np.ndarray
    predictand: np.ndarray
    draws: np.ndarray
    perturbations: np.ndarray
    spectrum: np.ndarray
    isotropic: bool


def concentrate_spectrum(lyap: np.ndarray, kappa: float) -> np.ndarray:
    """Stretch a spectrum about its mean; the sum is unchanged."""
    lyap = np.asarray(lyap, dtype=float)
    return lyap + kappa * (lyap - lyap.mean())


def initialize(ref: ReferenceManifold, cfg: ModelConfig) -> InitialEnsemble:
    """Two-step initialization on the reference manifold.

    Members are drawn from the reference samples with the manifold
    weights.  Each draw is then perturbed along the source directions with
    variance shares given by the positive part of the concentrated
    spectrum, and rescaled so that its energy ``phi`` equals that of the
    draw.  Without positive exponents the shares are isotropic and a
    warning is issued.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    M = cfg.ensemble_size
    idx = rng.choice(ref.states.shape[0], size=M, p=ref.weights / ref.weights.sum())
    draws = ref.states[idx]
    spectrum = concentrate_spectrum(ref.lyapunov, cfg.concentration)
    pos = np.maximum(spectrum, 0.0)
    isotropic = not np.any(pos > 0)
    if isotropic:
        warnings.warn("no positive Lyapunov exponent; using isotropic perturbations", RuntimeWarning, stacklevel=2)
        shares = np.full(ref.n_sources, 1.0 / ref.n_sources)
    else:
        shares = pos / pos.sum()
    # spectrum entries refer to sources in lyapunov_order
    weights = np.empty(ref.n_sources)
    weights[ref.lyapunov_order] = shares
    g = rng.normal(size=draws.shape)
    delta = cfg.perturbation * g * np.sqrt(weights)
    states = draws + delta
    Q = ref.energy_form
    e0 = np.einsum("ni,ij,nj->n", draws, Q, draws)
    e1 = np.einsum("ni,ij,nj->n", states, Q, states)
    ok = e1 > 0
    states[ok] *= np.sqrt(e0[ok] / e1[ok])[:, None]
    return InitialEnsemble(states, ref.predictand[idx].copy(), draws, delta, spectrum, isotropic)


# ---------------------------------------------------------------------------
# Integration


@dataclass(frozen=True, eq=False)
class SimulationEnsemble:
    """Ensemble trajectories and quantile summaries.

    ``trajectories`` has shape ``(member, time, cell)`` in standardized
    predictand units, ``sources`` ``(member, time, m)``.  Flagged members
    are excluded from ``quantile_summary`` ``(time, 5, cell)``.
    """

    trajectories: np.ndarray
    sources: np.ndarray
    flagged: np.ndarray
    quantile_summary: np.ndarray
    time: TimeAxis
    z_mean: np.ndarray
    z_scale: np.ndarray

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flagged))

    @property
    def members(self) -> np.ndarray:
        return self.trajectories[~self.flagged]

    def series(self, weights: np.ndarray | None = None) -> np.ndarray:
        """Per-member weighted cell mean, shape ``(member, time)``, unflagged only."""
        tr = self.members
        if weights is None:
            return tr.mean(axis=2)
        w = np.asarray(weights, dtype=float).ravel()
        return tr @ (w / w.sum())

    def destandardize(self, floor: float | None = None) -> tuple[np.ndarray, float]:
        """Members in physical units, optionally clipped at ``floor``, and the clip fraction."""
        v = self.members * self.z_scale + self.z_mean
        if floor is None:
            return v, 0.0
        below = v < floor
        return np.maximum(v, floor), float(np.mean(below)) if v.size else 0.0

    def write_summary(self, path, obs: np.ndarray | None = None, weights: np.ndarray | None = None) -> Path:
        """CSV with ``timestamp,q05,q25,q50,q75,q95,obs,obs_rank`` for the cell-mean series."""
        s = self.series(weights)
        qs = np.quantile(s, QUANTILES, axis=0).T
        ranks = observation_quantiles(s, obs) if obs is not None else None
        lines = ["timestamp,q05,q25,q50,q75,q95,obs,obs_rank"]
        for t in range(s.shape[1]):
            o = "" if obs is None else _fmt(obs[t])
            r = "" if ranks is None else _fmt(ranks[t])
            lines.append(",".join([_fmt(self.time.timestamps[t])] + [_fmt(v) for v in qs[t]] + [o, r]))
        p = Path(path)
        _atomic_write_text(p, "\n".join(lines) + "\n")
        return p


def rk4_step(f, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(ref: ReferenceManifold, x0: np.ndarray, z0: np.ndarray, n_steps: int, h: float | None = None, substeps: int = 1):
    """RK4 integration of sources and predictand; returns ``(x, z, flagged)`` trajectories."""
    h = ref.step if h is None else h
    m = ref.n_sources

    def rhs(y):
        x = y[:, :m]
        return np.concatenate([ref.source_rate(x), ref.predictand_rate(x)], axis=1)

    y = np.concatenate([np.asarray(x0, dtype=float), np.asarray(z0, dtype=float)], axis=1)
    out = np.empty((y.shape[0], n_steps + 1, y.shape[1]))
    out[:, 0] = y
    flagged = np.zeros(y.shape[0], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(n_steps):
            for _ in range(substeps):
                y = rk4_step(rhs, y, h / substeps)
                bad = ~np.all(np.isfinite(y), axis=1) | np.any(np.abs(y[:, :m]) > BLOWUP, axis=1)
                if np.any(bad):
                    flagged |= bad
                    y[bad] = 0.0
            out[:, t + 1] = y
    return out[:, :, :m], out[:, :, m:], flagged


def simulate(ref: ReferenceManifold, init: InitialEnsemble, cfg: ModelConfig, t0: float = 0.0) -> SimulationEnsemble:
    """Integrate every member for ``cfg.horizon`` steps at the data step."""
    x, z, flagged = integrate(ref, init.states, init.predictand, cfg.horizon)
    if np.any(flagged):
        warnings.warn(f"{int(flagged.sum())} member(s) blew up and were excluded", RuntimeWarning, stacklevel=2)
    good = z[~flagged]
    if good.shape[0] == 0:
        raise FloatingPointError("every ensemble member blew up")
    qs = np.quantile(good, QUANTILES, axis=0).transpose(1, 0, 2)
    times = TimeAxis(t0 + ref.step * np.arange(cfg.horizon + 1))
    return SimulationEnsemble(z, x, flagged, qs, times, ref.z_mean, ref.z_scale)


def observation_quantiles(ens, obs) -> np.ndarray:
    """Empirical CDF rank of ``obs`` within the members at every step.

    ``ens`` is a :class:`SimulationEnsemble` (cell-mean series) or an
    array ``(member, time)``.  The rank is the fraction of members not
    exceeding the observation, so it lies in ``[0, 1]``.
    """
    s = ens.series() if isinstance(ens, SimulationEnsemble) else np.asarray(ens, dtype=float)
    obs = np.asarray(obs, dtype=float).ravel()
    if obs.shape[0] != s.shape[1]:
        raise ValueError(f"observation length {obs.shape[0]} does not match the ensemble horizon {s.shape[1]}")
    return np.mean(s <= obs[None, :], axis=0)
