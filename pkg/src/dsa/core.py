"""
Extraction of dynamically independent sources.

Observables are standardized and whitened by principal components.  An
optional quadratic deflation removes directions that are (up to noise)
polynomial functions of the others.  The remaining whitened coordinates
are rotated to minimize the Sobolev norm of the off-diagonal part of the
interaction tensors, summed over orders with ``1/k!`` weights.

Per-sample tensors are estimated once in whitened coordinates.  Under an
orthogonal change of coordinates ``x = W u`` they transform as
``D_x = W D_u (W^T)^{(x) k}``, and the local regression is equivariant
because neighborhoods depend only on Euclidean distances.  The Frobenius
norm is rotation invariant, so minimizing the off-diagonal norm is the
same as maximizing the squared diagonal entries, which needs no refitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm, expm_frechet
from scipy.optimize import minimize

from .field import SpatioTemporalField, TimeAxis, _atomic_write_text, _fmt, series_field
from .infostats import mutual_information, seeds_for
from .interaction import (
    InteractionStack,
    InteractionTensor,
    interaction_from_samples,
    _is_uniform_in_space,
)
from .numdiff import (
    RegressionError,
    detect_jumps,
    local_polynomial_fit,
    monomial_exponents,
    monomials,
    multisets,
    time_derivative_array,
)

PCA_TOL = 1e-2
DEFLATION_TOL = 0.05
CANDIDATE_WINDOW = 0.05
TIE_TOL = 1e-9
SHELL_BAND = 0.10


class ExtractionError(RuntimeError):
    """Optimizer or conditioning failure during source extraction."""


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class PhysicalScores:
    """Proxies for entropy production and energy consumption.

    ``gamma`` is the sum of positive Lyapunov exponents (nat per step) of
    the fitted one-step source maps on the equienergetic shell; ``xi`` the
    mean rate of change of the fitted energy form on the isentropic shell.
    """

    gamma: float
    xi: float
    lyapunov: np.ndarray
    energy_form: np.ndarray
    n_energy_shell: int
    n_entropy_shell: int


@dataclass(frozen=True, eq=False)
class Deflation:
    """A whitened direction explained by a quadratic function of the rest.

    ``normal`` is the removed unit direction, ``basis`` an orthonormal basis
    of its complement (columns), ``coef`` the regression coefficients on
    :func:`~dsa.numdiff.monomial_exponents` ``(d - 1, 2)`` of the complement
    coordinates, and ``residual_fraction`` the unexplained variance share.
    """

    normal: np.ndarray
    basis: np.ndarray
    coef: np.ndarray
    residual_fraction: float


@dataclass(frozen=True, eq=False)
class SourceTransform:
    """Map from observables to sources.

    ``loadings`` (d, p) maps standardized observables to whitened
    coordinates; ``obs_mean`` and ``obs_scale`` standardize the observables.
    ``deflations`` are applied in order; ``rotation`` (m_dyn, m_dyn) then
    acts on the remaining coordinates.  Deflation residuals are appended
    after the rotated sources.  ``src_mean``, ``src_scale`` and ``signs``
    fix the final standardization and sign.
    """

    kind: str
    obs_mean: np.ndarray
    obs_scale: np.ndarray
    loadings: np.ndarray
    deflations: tuple
    rotation: np.ndarray
    src_mean: np.ndarray
    src_scale: np.ndarray
    signs: np.ndarray
    order: np.ndarray

    @property
    def n_sources(self) -> int:
        return self.rotation.shape[0] + len(self.deflations)

    def raw(self, y: np.ndarray) -> np.ndarray:
        u = ((y - self.obs_mean) / self.obs_scale) @ self.loadings.T
        resid = []
        for dfl in self.deflations:
            c = u @ dfl.basis
            r = u @ dfl.normal - monomials(c, monomial_exponents(c.shape[1], 2)) @ dfl.coef
            resid.append(r)
            u = c
        out = u @ self.rotation.T
        if resid:
            out = np.column_stack([out] + resid)
        return out

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Sources for observables ``y`` of shape ``(n, p)``."""
        x = self.raw(np.asarray(y, dtype=float))
        return ((x - self.src_mean) / self.src_scale * self.signs)[:, self.order]

    def linear_part(self) -> np.ndarray:
        """Linear map from standardized observables to the rotated sources."""
        a = self.loadings
        for dfl in self.deflations:
            a = dfl.basis.T @ a
        return self.rotation @ a

    def to_text(self) -> str:
        lines = [f"kind {self.kind}", f"m {self.n_sources}", f"p {self.loadings.shape[1]}"]
        lines.append("obs_mean " + " ".join(_fmt(v) for v in self.obs_mean))
        lines.append("obs_scale " + " ".join(_fmt(v) for v in self.obs_scale))
        lin = self.linear_part()
        for i in range(lin.shape[0]):
            lines.append(f"linear {i} " + " ".join(_fmt(v) for v in lin[i]))
        for j, d in enumerate(self.deflations):
            lines.append(f"deflation {j} residual_fraction {_fmt(d.residual_fraction)}")
            lines.append(f"deflation {j} normal " + " ".join(_fmt(v) for v in d.normal))
            lines.append(f"deflation {j} quadratic " + " ".join(_fmt(v) for v in d.coef))
        lines.append("src_mean " + " ".join(_fmt(v) for v in self.src_mean))
        lines.append("src_scale " + " ".join(_fmt(v) for v in self.src_scale))
        lines.append("signs " + " ".join(_fmt(v) for v in self.signs))
        lines.append("order " + " ".join(str(int(v)) for v in self.order))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class DynamicSourceSet:
    """Extracted sources with their diagnostics."""

    sources: SpatioTemporalField
    transform: SourceTransform
    interaction_stack: InteractionStack | None
    nu: tuple
    physical: PhysicalScores | None
    retained: np.ndarray
    objective: float = np.nan
    audit: tuple = ()
    cutoff: tuple = ()

    @property
    def series(self) -> np.ndarray:
        return self.sources.cell_series()[:, :, 0].T

    @property
    def n_sources(self) -> int:
        return self.sources.n_components

    def retained_sources(self) -> np.ndarray:
        return self.series[:, self.retained]

    def write(self, directory) -> None:
        """Sources as a column-text field plus a flat transform file."""
        from .field import write_field

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_field(self.sources, d / "sources.txt")
        _atomic_write_text(d / "transform.txt", self.transform.to_text())


@dataclass(frozen=True)
class ExtractionConfig:
    beta: int = 3
    m_max: int = 8
    kind: str = "linear"
    restarts: int = 16
    seed: int = 0
    max_iter: int = 500
    gtol: float = 1e-8
    sobolev_order: int = 1
    n_neighbors: int | None = None
    fraction: float = 0.1
    shuffles: int = 200

    def __post_init__(self):
        if not 1 <= self.beta <= 6:
            raise ValueError("beta must lie in 1..6")
        if self.kind not in ("linear", "polynomial"):
            raise ValueError("transform kind must be 'linear' or 'polynomial'")
        if self.m_max < 1 or self.restarts < 1:
            raise ValueError("m_max and restarts must be positive")


# ---------------------------------------------------------------------------
# Observables


def observable_matrix(y: SpatioTemporalField) -> tuple[np.ndarray, np.ndarray]:
    """Observables as ``(n_time, p)`` with per-variable area weights.

    A field that is identical in every cell contributes one variable per
    component; otherwise every (component, cell) pair is a variable.
    """
    if y.has_missing:
        raise ValueError("observables have missing values; run fill() first")
    v = y.cell_series()
    if _is_uniform_in_space(y):
        return v[:, :, 0].T.copy(), np.ones(y.n_components)
    w = np.tile(y.grid.cell_area_weights.ravel(), y.n_components)
    return v.transpose(1, 0, 2).reshape(y.n_time, -1), w


def whiten(Y: np.ndarray, weights: np.ndarray, m_max: int, tol: float = PCA_TOL):
    """Standardize and project onto leading principal components with unit variance.

    Components with eigenvalue below ``tol`` times the largest are dropped.
    Returns ``(u, mean, scale, loadings, eigenvalues)`` where
    ``u = ((Y - mean) / scale) @ loadings.T``.
    """
    mean = Y.mean(axis=0)
    scale = Y.std(axis=0)
    if np.any(scale <= 0):
        raise ValueError(f"observable(s) {np.flatnonzero(scale <= 0).tolist()} are constant")
    Z = (Y - mean) / scale * np.sqrt(weights)
    cov = Z.T @ Z / Z.shape[0]
    ev, vec = np.linalg.eigh(cov)
    ev, vec = ev[::-1], vec[:, ::-1]
    keep = min(int(np.sum(ev > tol * ev[0])), m_max)
    vec = vec[:, :keep]
    # deterministic eigenvector signs: largest loading positive
    sgn = np.sign(vec[np.argmax(np.abs(vec), axis=0), np.arange(keep)])
    vec = vec * sgn
    loadings = (vec * np.sqrt(weights)[:, None]).T / np.sqrt(ev[:keep])[:, None]
    u = ((Y - mean) / scale) @ loadings.T
    return u, mean, scale, loadings, ev


# ---------------------------------------------------------------------------
# Quadratic deflation


def _quad_residual(u: np.ndarray, normal: np.ndarray):
    normal = normal / np.linalg.norm(normal)
    q, _ = np.linalg.qr(np.column_stack([normal, np.eye(u.shape[1])]))
    basis = q[:, 1 : u.shape[1]]
    c = u @ basis
    A = monomials(c, monomial_exponents(c.shape[1], 2))
    target = u @ normal
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    r = target - A @ coef
    return float(np.var(r) / np.var(target)), basis, coef, r


def _sphere_points(d: int, n: int, rng) -> np.ndarray:
    pts = np.vstack([np.eye(d), rng.normal(size=(n, d))])
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def find_deflation(u: np.ndarray, rng, tol: float = DEFLATION_TOL, starts: int = 24) -> Deflation | None:
    """Direction of ``u`` best explained by a quadratic function of its complement."""
    d = u.shape[1]
    if d < 2:
        return None

    def obj(v):
        return _quad_residual(u, v)[0]

    best = None
    for v0 in _sphere_points(d, starts, rng):
        res = minimize(obj, v0, method="Nelder-Mead", options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    if best.fun > tol:
        return None
    normal = best.x / np.linalg.norm(best.x)
    if normal[np.argmax(np.abs(normal))] < 0:
        normal = -normal
    frac, basis, coef, _ = _quad_residual(u, normal)
    return Deflation(normal, basis, coef, frac)


# ---------------------------------------------------------------------------
# Tensor objective


def _dense(compact: np.ndarray, dim: int, k: int) -> np.ndarray:
    """Dense ``(n, r, d, ..., d)`` from compact ``(n, r, n_ms)``."""
    lookup = {m: j for j, m in enumerate(multisets(dim, k))}
    out = np.empty(compact.shape[:2] + (dim,) * k)
    for idx in np.ndindex(*(dim,) * k):
        out[(slice(None), slice(None)) + idx] = compact[:, :, lookup[tuple(sorted(idx))]]
    return out


@dataclass(frozen=True, eq=False)
class TensorSamples:
    """Dense per-sample tensors and their consecutive differences per order."""

    tensors: tuple
    diffs: tuple
    n_neighbors: tuple


def sample_tensors(
    u: np.ndarray,
    udot: np.ndarray,
    sample_index: np.ndarray,
    beta: int,
    n_neighbors: int | None = None,
    sobolev_order: int = 1,
    fraction: float = 0.04,
) -> TensorSamples:
    d = u.shape[1]
    tens, diffs, ks = [], [], []
    cont = np.diff(sample_index) == 1
    for k in range(1, beta + 1):
        fit = local_polynomial_fit(u, udot, k, n_neighbors, fraction)
        t = _dense(fit.derivative_tensor(k), d, k)
        tens.append(t)
        diffs.append((t[1:] - t[:-1])[cont] if sobolev_order >= 1 else t[:0])
        ks.append(fit.n_neighbors)
    return TensorSamples(tuple(tens), tuple(diffs), tuple(ks))


def _contract(t: np.ndarray, w: np.ndarray, times: int) -> np.ndarray:
    """Contract the last ``times`` axes of ``t`` with ``w``."""
    for _ in range(times):
        t = t @ w
    return t


def _diag_and_grad(t: np.ndarray, W: np.ndarray, k: int):
    """Diagonal entries ``(n, m)`` of the rotated tensors and their row gradients ``(n, m, d)``."""
    n = t.shape[0]
    m, d = W.shape
    diag = np.empty((n, m))
    grad = np.empty((n, m, d))
    for i in range(m):
        w = W[i]
        drv = _contract(t, w, k - 1) if k > 1 else t
        # drv: (n, d_resp, d) with one driver slot left open
        full = drv @ w
        diag[:, i] = full @ w
        grad[:, i] = full + k * np.einsum("nja,j->na", drv, w)
    return diag, grad


def objective_terms(ts: TensorSamples, W: np.ndarray):
    """Objective at rotation ``W``, its gradient in ``W`` and the raw ``nu_k``.

    The objective is ``sum_k (1/k!) nu_k / E_k`` with ``E_k`` the
    rotation-invariant total energy of order ``k`` (value plus difference
    terms), so that noisy high-order estimates do not swamp the first order.
    """
    total = 0.0
    G = np.zeros_like(W)
    nus = []
    for k, (t, dt) in enumerate(zip(ts.tensors, ts.diffs), start=1):
        nu = 0.0
        energy = 0.0
        gk = np.zeros_like(W)
        for arr in (t, dt):
            if arr.shape[0] == 0:
                continue
            diag, grad = _diag_and_grad(arr, W, k)
            const = np.mean(np.sum(arr.reshape(arr.shape[0], -1) ** 2, axis=1))
            energy += const
            nu += const - np.mean(np.sum(diag**2, axis=1))
            gk -= 2.0 * np.einsum("ni,nid->id", diag, grad) / arr.shape[0]
        nus.append(nu)
        scale = math.factorial(k) * max(energy, 1e-300)
        total += nu / scale
        G += gk / scale
    return total, G, nus


def _skew(theta: np.ndarray, d: int) -> np.ndarray:
    S = np.zeros((d, d))
    iu = np.triu_indices(d, 1)
    S[iu] = theta
    return S - S.T


def _optimize_rotation(ts: TensorSamples, W0: np.ndarray, cfg: ExtractionConfig):
    d = W0.shape[0]
    iu = np.triu_indices(d, 1)

    def f(theta):
        S = _skew(theta, d)
        W = expm(S) @ W0
        val, G, _ = objective_terms(ts, W)
        gS = expm_frechet(S.T, G @ W0.T, compute_expm=False)
        return val, gS[iu] - gS.T[iu]

    if d == 1:
        return W0, objective_terms(ts, W0)[0], True
    res = minimize(f, np.zeros(len(iu[0])), jac=True, method="BFGS", options={"gtol": cfg.gtol, "maxiter": cfg.max_iter})
    W = expm(_skew(res.x, d)) @ W0
    return W, float(res.fun), bool(res.success or np.linalg.norm(res.jac) < 1e-5)


def _random_orthogonal(d: int, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _same_up_to_signed_permutation(A: np.ndarray, B: np.ndarray, tol: float = 1e-3) -> bool:
    M = np.abs(A @ B.T)
    return bool(np.all(np.abs(np.sort(M, axis=1)[:, -1] - 1.0) < tol))


# ---------------------------------------------------------------------------
# Physical scores


def _fit_map(x: np.ndarray, degree: int) -> np.ndarray:
    """Least-squares polynomial one-step map ``x_{t+1} = M(x_t)`` per column."""
    coefs = []
    for i in range(x.shape[1]):
        coefs.append(np.polynomial.polynomial.polyfit(x[:-1, i], x[1:, i], degree))
    return np.array(coefs)


def _shell(values: np.ndarray, band: float) -> np.ndarray:
    med = np.median(values)
    iqr = np.subtract(*np.percentile(values, [75, 25]))
    return np.abs(values - med) <= band * max(iqr, 1e-300)


def _energy_form(x: np.ndarray, xdot: np.ndarray) -> np.ndarray:
    """Positive-definite quadratic form minimizing violations of ``d(phi)/dt <= 0``.

    The form is ``L L^T`` normalized to trace ``m``, starting from the
    identity; the loss is the mean squared positive part of
    ``2 x^T Q xdot``.
    """
    m = x.shape[1]
    il = np.tril_indices(m)

    def build(theta):
        L = np.zeros((m, m))
        L[il] = theta
        Q = L @ L.T
        return Q * (m / np.trace(Q))

    def loss(theta):
        Q = build(theta)
        rate = 2.0 * np.einsum("ni,ij,nj->n", x, Q, xdot)
        return float(np.mean(np.maximum(rate, 0.0) ** 2))

    theta0 = np.eye(m)[il]
    if loss(theta0) == 0.0:
        return np.eye(m)
    res = minimize(loss, theta0, method="Nelder-Mead" if m <= 3 else "BFGS", options={"maxiter": 2000})
    return build(res.x if res.fun < loss(theta0) else theta0)


def physical_scores(
    x: np.ndarray,
    step: float = 1.0,
    degree: int = 3,
    horizon: int = 10,
    band: float = SHELL_BAND,
) -> PhysicalScores:
    """Entropy-production and energy-consumption proxies of a source set.

    Parameters
    ----------
    x : array, shape (n, m)
        Standardized sources.
    degree : int
        Degree of the fitted diagonal one-step maps.
    horizon : int
        Length of the orbit segments over which finite-time Lyapunov
        exponents are averaged.

    Notes
    -----
    Each source's one-step map ``x_i(t+1) = M_i(x_i(t))`` is fitted by
    least squares; the exponent of source ``i`` is the mean of
    ``ln|M_i'(x_i)|`` over orbit segments of ``horizon`` steps starting on
    the equienergetic shell (``|phi - median| <= band * IQR``).  ``gamma``
    sums the positive exponents.  ``xi`` is the mean of ``d(phi)/dt`` on
    the isentropic shell, the samples whose local expansion rate
    ``sum_i ln|M_i'|`` lies within the same band of its median.  A shell
    with no samples is widened once to twice the band.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, m = x.shape
    xdot, valid = _derivs(x, step, shared=False)
    Q = _energy_form(x[valid], xdot[valid])
    phi = np.einsum("ni,ij,nj->n", x, Q, x)
    coefs = _fit_map(x, degree)
    dcoefs = [np.polynomial.polynomial.polyder(c) for c in coefs]
    slope = np.column_stack([np.polynomial.polynomial.polyval(x[:, i], dcoefs[i]) for i in range(m)])
    logd = np.log(np.maximum(np.abs(slope), 1e-300))

    def shell(values, mask):
        for b in (band, 2 * band):
            s = _shell(values[mask], b)
            if np.any(s):
                out = np.zeros(values.shape, dtype=bool)
                out[np.flatnonzero(mask)[s]] = True
                return out
        raise ValueError("no samples in the shell after widening")

    starts = shell(phi, np.arange(n) < n - horizon)
    idx = np.flatnonzero(starts)
    seg = np.cumsum(np.vstack([np.zeros((1, m)), logd]), axis=0)
    lyap = np.mean((seg[idx + horizon] - seg[idx]) / horizon, axis=0)
    gamma = float(np.sum(np.maximum(lyap, 0.0)))
    rate = np.sum(logd, axis=1)
    iso = shell(rate, valid)
    phidot = 2.0 * np.einsum("ni,ij,nj->n", x[iso], Q, xdot[iso])
    xi = float(np.mean(phidot))
    return PhysicalScores(gamma, xi, np.sort(lyap)[::-1], Q, int(starts.sum()), int(iso.sum()))


# ---------------------------------------------------------------------------
# Selection and cut-off


def disambiguate(candidates: Sequence[DynamicSourceSet]) -> DynamicSourceSet:
    """Lexicographic choice: maximum ``gamma``, then minimum ``xi``, then lowest ``nu_1``.

    Values within ``1e-9`` count as ties.  The winner carries an audit
    trail of all candidates' scores.
    """
    if not candidates:
        raise ValueError("no candidates to choose from")
    if len(candidates) == 1:
        return candidates[0]
    pool = list(range(len(candidates)))
    keys = [
        (lambda c: -c.physical.gamma),
        (lambda c: c.physical.xi),
        (lambda c: c.nu[0]),
    ]
    for key in keys:
        vals = [key(candidates[i]) for i in pool]
        best = min(vals)
        pool = [i for i, v in zip(pool, vals) if v <= best + TIE_TOL]
        if len(pool) == 1:
            break
    win = pool[0]
    audit = tuple(
        {"candidate": i, "gamma": c.physical.gamma, "xi": c.physical.xi, "nu1": c.nu[0], "objective": c.objective, "selected": i == win}
        for i, c in enumerate(candidates)
    )
    return replace(candidates[win], audit=audit)


def _lag_features(u: np.ndarray) -> np.ndarray:
    quad = monomials(u, [e for e in monomial_exponents(u.shape[1], 2) if sum(e) == 2])
    return np.column_stack([u, quad])


def cutoff_sources(
    x: DynamicSourceSet | np.ndarray,
    y_features: np.ndarray,
    shuffles: int = 200,
    seed=0,
):
    """Keep sources that share dynamic information with the observables.

    For each source the Gaussian-copula mutual information between its
    value at ``t + 1`` and the observable features at ``t`` (whitened
    components plus their quadratic products) is compared with the 95%
    quantile of a shuffle null; the source is retained when above.
    Returns the updated set (or, for an array input, ``(retained, results)``).
    """
    series = x.series if isinstance(x, DynamicSourceSet) else np.asarray(x, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    feats = _lag_features(np.asarray(y_features, dtype=float))
    results = []
    base = [int(v) for v in np.atleast_1d(seed)]
    for i in range(series.shape[1]):
        rng_seed = base + [101, i]
        data = np.column_stack([series[1:, i], feats[:-1]])
        if np.ptp(series[:, i]) == 0:
            results.append(None)
            continue
        r = mutual_information(data, [0], list(range(1, data.shape[1])), shuffles, rng_seed)
        results.append(r)
    keep = np.array([r is not None and r.significant for r in results], dtype=bool)
    if not isinstance(x, DynamicSourceSet):
        return keep, results
    return replace(x, retained=keep, cutoff=tuple(results))


# ---------------------------------------------------------------------------
# Extraction


def _derivs(u: np.ndarray, step: float, shared: bool = True):
    """First time derivatives of the columns of ``u`` and the joint validity mask.

    With ``shared`` a discontinuity of any column is one of every column,
    as for whitened coordinates that mix the sources; otherwise each column
    keeps its own jump set, as for separate source processes.
    """
    jumps = detect_jumps(u)
    if shared:
        jumps = np.repeat(jumps.any(axis=1, keepdims=True), u.shape[1], axis=1)
    td = time_derivative_array(u[None], step, 1, jumps=jumps)
    return td.derivs[0, 0], td.valid[0, 0].all(axis=1)


def nu_values(
    x: np.ndarray, step: float, beta: int, n_neighbors=None, sobolev_order: int = 1, shared_jumps: bool = False
) -> list[float]:
    """Off-diagonal Sobolev norms ``nu_k`` of a multivariate series, k = 1..beta.

    Use ``shared_jumps`` for mixed observables and the default per-column
    jump sets for separate sources.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    xd, valid = _derivs(x, step, shared_jumps)
    idx = np.flatnonzero(valid)
    out = []
    for k in range(1, beta + 1):
        t = interaction_from_samples(x[idx], xd[idx], k, sample_index=idx, n_neighbors=n_neighbors, sobolev_order=sobolev_order)
        out.append(t.offdiag_norm)
    return out


def offdiag_null(
    x: np.ndarray, step: float, beta: int, shuffles: int = 100, seed=0, n_neighbors=None
) -> np.ndarray:
    """Null distribution of ``nu_k`` under independent cyclic shifts of each source.

    Returns an array ``(shuffles, beta)``.  Each source keeps its own
    dynamics (value, derivative and validity are shifted together) while
    cross-dependence is destroyed.
    """
    x = np.asarray(x, dtype=float)
    n, m = x.shape
    td = time_derivative_array(x[None], step, 1, jumps=detect_jumps(x))
    d = td.derivs[0, 0]
    v = td.valid[0, 0]
    out = np.empty((shuffles, beta))
    for r, rng in enumerate(seeds_for(seed, shuffles)):
        shifts = np.concatenate([[0], rng.integers(1, n, size=m - 1)])
        xs = np.column_stack([np.roll(x[:, i], s) for i, s in enumerate(shifts)])
        ds = np.column_stack([np.roll(d[:, i], s) for i, s in enumerate(shifts)])
        vs = np.column_stack([np.roll(v[:, i], s) for i, s in enumerate(shifts)]).all(axis=1)
        idx = np.flatnonzero(vs)
        for k in range(1, beta + 1):
            t = interaction_from_samples(xs[idx], ds[idx], k, sample_index=idx, n_neighbors=n_neighbors, keep_samples=True)
            out[r, k - 1] = t.offdiag_norm
    return out


def _finalize(raw: np.ndarray, transform: SourceTransform, loadings_obs: np.ndarray):
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale <= 0] = 1.0
    z = (raw - mean) / scale
    signs = np.ones(raw.shape[1])
    for i in range(loadings_obs.shape[0]):
        row = loadings_obs[i]
        j = np.argmax(np.abs(row))
        signs[i] = 1.0 if row[j] >= 0 else -1.0
    return z * signs, mean, scale, signs


def extract_sources(y: SpatioTemporalField, cfg: ExtractionConfig = ExtractionConfig()) -> DynamicSourceSet:
    """Extract dynamically independent sources from observables ``y``.

    The pipeline is whitening, optional quadratic deflation, multi-start
    minimization of the interaction objective over rotations, physical
    disambiguation of all minima within 5% of the best, and the
    information cut-off.
    """
    Y, wts = observable_matrix(y)
    step = y.time.step
    u, mu, sc, load, ev = whiten(Y, wts, cfg.m_max)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    deflations = []
    resid = []
    cur = u
    if cfg.kind == "polynomial":
        while cur.shape[1] > 1:
            dfl = find_deflation(cur, rng)
            if dfl is None:
                break
            c = cur @ dfl.basis
            resid.append(cur @ dfl.normal - monomials(c, monomial_exponents(c.shape[1], 2)) @ dfl.coef)
            deflations.append(dfl)
            cur = c
    d = cur.shape[1]
    udot, valid = _derivs(cur, step)
    idx = np.flatnonzero(valid)
    try:
        ts = sample_tensors(cur[idx], udot[idx], idx, cfg.beta, cfg.n_neighbors, cfg.sobolev_order, cfg.fraction)
    except RegressionError as exc:
        raise ExtractionError(f"conditioning failure in the local regressions: {exc}") from None
    start_val = objective_terms(ts, np.eye(d))[0]
    starts = [np.eye(d)] + [_random_orthogonal(d, r) for r in seeds_for([cfg.seed, 1], cfg.restarts - 1)]
    found = []
    for W0 in starts:
        W, val, ok = _optimize_rotation(ts, W0, cfg)
        if ok:
            found.append((val, W))
    if not found:
        raise ExtractionError(f"optimizer failed to converge from all {cfg.restarts} starts")
    found.sort(key=lambda p: p[0])
    best = found[0][0]
    window = abs(best) * CANDIDATE_WINDOW + 1e-12
    distinct = []
    for val, W in found:
        if val > best + window:
            break
        if not any(_same_up_to_signed_permutation(W, W2) for _, W2 in distinct):
            distinct.append((val, W))

    feats = u
    candidates = []
    for val, W in distinct:
        if val > start_val + 1e-12:
            continue
        base = SourceTransform(
            cfg.kind, mu, sc, load, tuple(deflations), W, np.zeros(d + len(resid)), np.ones(d + len(resid)),
            np.ones(d + len(resid)), np.arange(d + len(resid)),
        )
        raw = base.raw(Y)
        lin = np.vstack([base.linear_part(), np.array([dfl.normal @ _through(deflations, j) for j, dfl in enumerate(deflations)]).reshape(len(deflations), -1)]) if deflations else base.linear_part()
        xs, mean, scale, signs = _finalize(raw, base, lin)
        tr = replace(base, src_mean=mean, src_scale=scale, signs=signs)
        nus = objective_terms(ts, W)[2]
        phys = physical_scores(xs[:, :d], step, degree=max(2, cfg.beta))
        candidates.append(
            DynamicSourceSet(series_field(xs, y.time), tr, None, tuple(nus), phys, np.ones(xs.shape[1], bool), val)
        )
    if not candidates:
        raise ExtractionError("no candidate improves on the whitened starting point")
    win = disambiguate(candidates)
    win = cutoff_sources(win, feats, cfg.shuffles, cfg.seed)
    return _attach_stack(win, step, cfg)


def _through(deflations, j):
    """Map from whitened coordinates to the coordinates entering deflation ``j``."""
    a = None
    for dfl in deflations[:j]:
        a = dfl.basis.T if a is None else dfl.basis.T @ a
    return np.eye(deflations[0].basis.shape[0]) if a is None else a


def _attach_stack(s: DynamicSourceSet, step: float, cfg: ExtractionConfig) -> DynamicSourceSet:
    """Re-standardize the retained sources and compute their interaction stack."""
    keep = s.retained
    x = s.series
    if np.any(keep):
        xr = x[:, keep]
        xr = (xr - xr.mean(axis=0)) / xr.std(axis=0)
        x = x.copy()
        x[:, keep] = xr
    stack = None
    nus = s.nu
    if np.sum(keep) >= 1:
        xr = x[:, keep]
        xd, valid = _derivs(xr, step, shared=False)
        idx = np.flatnonzero(valid)
        tensors = tuple(
            interaction_from_samples(xr[idx], xd[idx], k, sample_index=idx, n_neighbors=cfg.n_neighbors, sobolev_order=cfg.sobolev_order)
            for k in range(1, cfg.beta + 1)
        )
        stack = InteractionStack(tensors)
        nus = tuple(t.offdiag_norm for t in tensors)
    return replace(s, sources=series_field(x, s.sources.time), interaction_stack=stack, nu=nus)
