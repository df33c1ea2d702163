"""
High-order derivative estimation.

Time derivatives use Richardson extrapolation of second-order central
differences over strides 1, 2 and 4 (sixth-order interior accuracy), with
one-sided stencils at record ends and next to detected jumps.  Space
derivatives use fourth-order compact (Padé) schemes solved as tridiagonal
systems one axis at a time.  State-space gradients come from weighted local
polynomial regression on nearest neighbors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded
from scipy.ndimage import median_filter
from scipy.spatial import cKDTree

from .field import SpatioTemporalField, _frozen

MAX_BETA = 6
INTERIOR_ACCURACY = 6
MIN_FALLBACK_ACCURACY = 4
JUMP_SIGMA = 5.0


class RegressionError(RuntimeError):
    """Raised when a local regression is rank deficient."""


@dataclass(frozen=True)
class SobolevConfig:
    beta: int = 5
    time_scheme: str = "richardson-cn"
    space_scheme: str = "compact-adi"
    detect_jumps: bool = True

    def __post_init__(self):
        if not 1 <= self.beta <= MAX_BETA:
            raise ValueError(f"beta must lie in [1, {MAX_BETA}]")
        if self.time_scheme not in ("richardson-cn", "central-stencil"):
            raise ValueError(f"unknown time scheme {self.time_scheme!r}")
        if self.space_scheme not in ("compact-adi", "central-stencil"):
            raise ValueError(f"unknown space scheme {self.space_scheme!r}")


# ---------------------------------------------------------------------------
# Stencils


@lru_cache(maxsize=None)
def fd_weights(offsets: tuple, order: int) -> np.ndarray:
    """Finite-difference weights on integer ``offsets`` for the given derivative order (unit step)."""
    offs = np.asarray(offsets, dtype=float)
    n = offs.size
    if n <= order:
        raise ValueError("not enough points for the derivative order")
    # Vandermonde system sum_j w_j o_j^m = m! delta_{m,order}, m < n.  The
    # offsets are rescaled to keep the system well conditioned.
    scale = max(1.0, np.max(np.abs(offs)))
    u = offs / scale
    V = np.vander(u, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = math.factorial(order)
    w = np.linalg.solve(V, rhs) / scale**order
    w.setflags(write=False)
    return w


def central_difference(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Minimal second-order central stencil for ``order``: (offsets, weights)."""
    half = (order + 1) // 2
    offs = tuple(range(-half, half + 1))
    return np.array(offs), fd_weights(offs, order)


@lru_cache(maxsize=None)
def richardson_stencil(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Central difference extrapolated over strides 1, 2, 4.

    With ``D(h)`` the second-order central difference at stride ``h``,
    ``E1 = (4 D(1) - D(2)) / 3``, ``E2 = (4 D(2) - D(4)) / 3`` and
    ``R = (16 E1 - E2) / 15 = (64 D(1) - 20 D(2) + D(4)) / 45``.
    """
    offs, w = central_difference(order)
    half = 4 * offs[-1]
    out = np.zeros(2 * half + 1)
    for stride, coef in ((1, 64.0), (2, -20.0), (4, 1.0)):
        out[half + stride * offs] += coef * w / stride**order / 45.0
    out.setflags(write=False)
    return np.arange(-half, half + 1), out


@lru_cache(maxsize=None)
def central_stencil(order: int, accuracy: int = INTERIOR_ACCURACY) -> tuple[np.ndarray, np.ndarray]:
    half = (order + 1) // 2 + accuracy // 2 - 1
    offs = tuple(range(-half, half + 1))
    return np.array(offs), fd_weights(offs, order)


def _interior_stencil(order: int, scheme: str):
    if scheme == "richardson-cn":
        return richardson_stencil(order)
    return central_stencil(order)


# ---------------------------------------------------------------------------
# Jump detection


def detect_jumps(x: np.ndarray, sigma: float = JUMP_SIGMA) -> np.ndarray:
    """Flag discontinuities between consecutive samples.

    ``x`` has shape ``(n_time, n_series)``.  The second difference is
    compared with its 7-point running median; residuals beyond ``sigma``
    robust standard deviations (with a floor at 1e-3 of the largest second
    difference) mark a jump on the adjacent interval with the larger first
    difference.  Returns a boolean array ``(n_time - 1, n_series)`` where
    entry ``i`` flags the interval between samples ``i`` and ``i + 1``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    jumps = np.zeros((max(n - 1, 0),) + x.shape[1:], dtype=bool)
    if n < 8:
        return jumps
    d1 = np.diff(x, axis=0)
    d2 = np.diff(d1, axis=0)
    resid = d2 - median_filter(d2, size=(7,) + (1,) * (d2.ndim - 1), mode="nearest")
    mad = np.median(np.abs(resid - np.median(resid, axis=0)), axis=0)
    scale = np.maximum(1.4826 * mad, 1e-3 * np.max(np.abs(d2), axis=0))
    scale = np.maximum(scale, 1e-300)
    flagged = np.abs(resid) > sigma * scale
    # second difference centered at sample i+1 touches intervals i and i+1
    left = np.abs(d1[:-1])
    right = np.abs(d1[1:])
    pick_left = flagged & (left >= right)
    pick_right = flagged & (right > left)
    jumps[:-1] |= pick_left
    jumps[1:] |= pick_right
    return jumps


# ---------------------------------------------------------------------------
# Time derivatives


@dataclass(frozen=True)
class TimeDerivatives:
    """Array-level result of :func:`time_derivative_array`.

    Attributes
    ----------
    derivs : ndarray, shape (max_order, n_comp, n_time, n_series)
    one_sided : ndarray of bool, same shape
        True where an asymmetric stencil was used.
    valid : ndarray of bool, same shape
        False where no jump-free stencil fits; those values are NaN.
    jumps : ndarray of bool, shape (n_time - 1, n_series)
        Detected discontinuities (union over components).
    """

    derivs: np.ndarray
    one_sided: np.ndarray
    valid: np.ndarray
    jumps: np.ndarray


def _fallback_window(i, seg_start, seg_stop, order):
    length = seg_stop - seg_start
    acc = min(INTERIOR_ACCURACY, length - order)
    if acc < MIN_FALLBACK_ACCURACY:
        return None
    npts = order + acc
    start = min(max(i - npts // 2, seg_start), seg_stop - npts)
    return start, npts


def time_derivative_array(
    x,
    step: float = 1.0,
    max_order: int = 1,
    scheme: str = "richardson-cn",
    detect: bool = True,
    jumps: np.ndarray | None = None,
) -> TimeDerivatives:
    """Derivatives of orders 1..max_order along axis 1 of ``x``.

    ``x`` has shape ``(n_comp, n_time, n_series)`` (a 1-D or 2-D array is
    promoted).  Jumps are detected per series as the union over components so
    that all components of a series share stencils, which keeps the operator
    linear across components.  A precomputed ``jumps`` array of shape
    ``(n_time - 1,)`` or ``(n_time - 1, n_series)`` replaces detection, so a
    response can be differentiated with the stencils of its drivers.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[None]
    nc, n, ns = x.shape
    if not np.all(np.isfinite(x)):
        raise ValueError("time derivatives need finite, mask-free input; run fill() first")
    need = max(_interior_min_length(o) for o in range(1, max_order + 1))
    if n < need:
        raise ValueError(f"record of {n} steps is shorter than the stencil width {need} for order {max_order}")
    if jumps is not None:
        jumps = np.asarray(jumps, dtype=bool)
        if jumps.ndim == 1:
            jumps = np.repeat(jumps[:, None], ns, axis=1)
        if jumps.shape != (n - 1, ns):
            raise ValueError(f"jump array shape {jumps.shape} does not match ({n - 1}, {ns})")
    elif detect:
        # the detector is scale free, so components are screened independently
        jumps = np.zeros((n - 1, ns), dtype=bool)
        for c in range(nc):
            jumps |= detect_jumps(x[c])
    else:
        jumps = np.zeros((n - 1, ns), dtype=bool)

    derivs = np.full((max_order, nc, n, ns), np.nan)
    one_sided = np.zeros(derivs.shape, dtype=bool)
    valid = np.zeros(derivs.shape, dtype=bool)
    # segment boundaries per series: a point's segment is [left, right)
    idx = np.arange(n)
    left = np.zeros((n, ns), dtype=int)
    right = np.full((n, ns), n, dtype=int)
    for s in np.flatnonzero(jumps.any(axis=0)):
        cuts = np.flatnonzero(jumps[:, s]) + 1
        pos = np.searchsorted(cuts, idx, side="right")
        bounds = np.concatenate([[0], cuts, [n]])
        left[:, s] = bounds[pos]
        right[:, s] = bounds[pos + 1]

    for o in range(1, max_order + 1):
        offs, w = _interior_stencil(o, scheme)
        h = offs[-1]
        scale = step**o
        if n > 2 * h:
            inner = np.zeros((nc, n - 2 * h, ns))
            for off, wk in zip(offs, w):
                if wk != 0.0:
                    inner += wk * x[:, h + off : n - h + off]
            derivs[o - 1, :, h : n - h] = inner / scale
        fits = (idx[:, None] - h >= left) & (idx[:, None] + h < right)
        valid[o - 1] = fits[None]
        cache = {}
        for i, s in zip(*np.nonzero(~fits)):
            key = (i - left[i, s], right[i, s] - left[i, s])
            if key not in cache:
                win = _fallback_window(key[0], 0, key[1], o)
                if win is None:
                    cache[key] = None
                else:
                    start, npts = win
                    ww = fd_weights(tuple(range(start - key[0], start - key[0] + npts)), o)
                    sym = (start - key[0]) == -(npts // 2) and npts % 2 == 1
                    cache[key] = (start - key[0], npts, ww, not sym)
            entry = cache[key]
            if entry is None:
                derivs[o - 1, :, i, s] = np.nan
                continue
            rel, npts, ww, asym = entry
            derivs[o - 1, :, i, s] = x[:, i + rel : i + rel + npts, s] @ ww / scale
            valid[o - 1, :, i, s] = True
            one_sided[o - 1, :, i, s] = asym
    return TimeDerivatives(derivs, one_sided, valid, jumps)


def _interior_min_length(order: int) -> int:
    return order + INTERIOR_ACCURACY


# ---------------------------------------------------------------------------
# Compact space derivatives


def _uniform_spacing(coords) -> float:
    c = np.asarray(coords, dtype=float)
    d = np.diff(c)
    h = (c[-1] - c[0]) / (c.size - 1)
    if np.max(np.abs(d - h)) > 1e-6 * abs(h):
        raise ValueError("space derivatives need a uniformly spaced axis")
    return float(h)


def compact_first(f: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Fourth-order Padé first derivative along ``axis``.

    Interior rows ``f'_{i-1}/4 + f'_i + f'_{i+1}/4 = 3 (f_{i+1} - f_{i-1}) / (4h)``;
    boundary rows ``f'_0 + 3 f'_1 = (-17 f_0 + 9 f_1 + 9 f_2 - f_3) / (6h)``.
    """
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    n = f.shape[0]
    if n < 5:
        raise ValueError(f"axis of length {n} is too short for the compact scheme (need 5)")
    shape = f.shape
    g = f.reshape(n, -1)
    rhs = np.empty_like(g)
    rhs[1:-1] = 0.75 * (g[2:] - g[:-2]) / h
    rhs[0] = (-17.0 * g[0] + 9.0 * g[1] + 9.0 * g[2] - g[3]) / (6.0 * h)
    rhs[-1] = -(-17.0 * g[-1] + 9.0 * g[-2] + 9.0 * g[-3] - g[-4]) / (6.0 * h)
    ab = np.zeros((3, n))
    ab[0, 1:] = 0.25
    ab[1, :] = 1.0
    ab[2, :-1] = 0.25
    ab[0, 1] = 3.0
    ab[2, n - 2] = 3.0
    out = solve_banded((1, 1), ab, rhs)
    return np.moveaxis(out.reshape(shape), 0, axis)


def compact_second(f: np.ndarray, h: float, axis: int = 0) -> np.ndarray:
    """Fourth-order Padé second derivative along ``axis``.

    Interior rows ``f''_{i-1}/10 + f''_i + f''_{i+1}/10 = 6 (f_{i+1} - 2 f_i + f_{i-1}) / (5h^2)``;
    boundary rows ``f''_0 + 10 f''_1 = (145 f_0 - 304 f_1 + 174 f_2 - 16 f_3 + f_4) / (12 h^2)``.
    """
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    n = f.shape[0]
    if n < 5:
        raise ValueError(f"axis of length {n} is too short for the compact scheme (need 5)")
    shape = f.shape
    g = f.reshape(n, -1)
    h2 = h * h
    rhs = np.empty_like(g)
    rhs[1:-1] = 1.2 * (g[2:] - 2.0 * g[1:-1] + g[:-2]) / h2
    cb = np.array([145.0, -304.0, 174.0, -16.0, 1.0]) / 12.0
    rhs[0] = cb @ g[:5] / h2
    rhs[-1] = cb @ g[::-1][:5] / h2
    ab = np.zeros((3, n))
    ab[0, 1:] = 0.1
    ab[1, :] = 1.0
    ab[2, :-1] = 0.1
    ab[0, 1] = 10.0
    ab[2, n - 2] = 10.0
    out = solve_banded((1, 1), ab, rhs)
    return np.moveaxis(out.reshape(shape), 0, axis)


def _central_axis(f, h, order, axis):
    # explicit sixth-order central stencil with one-sided ends
    g = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    shape = g.shape
    td = time_derivative_array(g.reshape(1, shape[0], -1), h, order, "central-stencil", detect=False)
    return np.moveaxis(td.derivs[order - 1][0].reshape(shape), 0, axis)


def axis_derivative(f, h: float, order: int, axis: int, scheme: str = "compact-adi") -> np.ndarray:
    """Derivative of any order along one axis by composing compact operators."""
    if order == 0:
        return np.asarray(f, dtype=float)
    if scheme == "central-stencil":
        return _central_axis(f, h, order, axis)
    out = np.asarray(f, dtype=float)
    for _ in range(order // 2):
        out = compact_second(out, h, axis)
    if order % 2:
        out = compact_first(out, h, axis)
    return out


def mixed_partial(f, spacings: Sequence[float], orders: Sequence[int], axes: Sequence[int], scheme: str = "compact-adi"):
    """Mixed partial derivative, applying one axis at a time (alternating directions)."""
    out = np.asarray(f, dtype=float)
    for h, o, ax in zip(spacings, orders, axes):
        out = axis_derivative(out, h, o, ax, scheme)
    return out


# ---------------------------------------------------------------------------
# Field-level API


@dataclass(frozen=True, eq=False)
class DerivativeStack:
    """Time and space derivatives of a field.

    ``time_derivs`` has shape ``(beta, comp, time, cell)``; ``space_derivs``
    maps a direction multi-index ``(n_lat, n_lon)`` to an array
    ``(comp, time, lat, lon)``.
    """

    source_field: SpatioTemporalField
    beta: int
    time_derivs: np.ndarray | None = None
    one_sided: np.ndarray | None = None
    valid: np.ndarray | None = None
    jumps: np.ndarray | None = None
    space_derivs: dict | None = None

    def time_derivative(self, order: int = 1) -> np.ndarray:
        """Order-``order`` time derivative shaped like the field values."""
        if self.time_derivs is None:
            raise ValueError("stack holds no time derivatives")
        return self.time_derivs[order - 1].reshape(self.source_field.values.shape)

    def valid_samples(self, order: int = 1) -> np.ndarray:
        """Boolean ``(time, cell)``: all components valid at this order."""
        return self.valid[order - 1].all(axis=0)

    def merge(self, other: "DerivativeStack") -> "DerivativeStack":
        return DerivativeStack(
            self.source_field,
            max(self.beta, other.beta),
            self.time_derivs if self.time_derivs is not None else other.time_derivs,
            self.one_sided if self.one_sided is not None else other.one_sided,
            self.valid if self.valid is not None else other.valid,
            self.jumps if self.jumps is not None else other.jumps,
            self.space_derivs if self.space_derivs is not None else other.space_derivs,
        )


def time_derivatives(f: SpatioTemporalField, cfg: SobolevConfig = SobolevConfig()) -> DerivativeStack:
    """Time derivatives of orders 1..beta for every component and cell."""
    if f.has_missing:
        raise ValueError("field has missing values; run fill() first")
    td = time_derivative_array(f.cell_series(), f.time.step, cfg.beta, cfg.time_scheme, cfg.detect_jumps)
    return DerivativeStack(
        f, cfg.beta, _frozen(td.derivs), _frozen(td.one_sided, bool), _frozen(td.valid, bool), _frozen(td.jumps, bool)
    )


def space_derivatives(
    f: SpatioTemporalField, cfg: SobolevConfig = SobolevConfig(), axes: Sequence[str] = ("lat", "lon")
) -> DerivativeStack:
    """Mixed spatial partials of total order 1..beta along the requested axes.

    Derivatives are per degree of the respective coordinate.
    """
    if f.has_missing:
        raise ValueError("field has missing values; run fill() first")
    names = {"lat": 0, "lon": 1}
    use = [names[a] for a in axes]
    coords = (f.grid.lat_values, f.grid.lon_values)
    h = [_uniform_spacing(coords[a]) for a in (0, 1)]
    for a in use:
        if coords[a].size < 5:
            raise ValueError(f"{('lat', 'lon')[a]} axis too short for space derivatives")
    out = {}
    for total in range(1, cfg.beta + 1):
        for a_lat in range(total + 1):
            a_lon = total - a_lat
            if (a_lat and 0 not in use) or (a_lon and 1 not in use):
                continue
            out[(a_lat, a_lon)] = _frozen(
                mixed_partial(f.values, (h[0], h[1]), (a_lat, a_lon), (2, 3), cfg.space_scheme)
            )
    return DerivativeStack(f, cfg.beta, space_derivs=out)


# ---------------------------------------------------------------------------
# State-space gradients


@lru_cache(maxsize=None)
def monomial_exponents(dim: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """Exponent vectors of all monomials of total degree <= ``degree``, graded order."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return tuple(out)


@lru_cache(maxsize=None)
def multisets(dim: int, k: int) -> tuple[tuple[int, ...], ...]:
    """Sorted driver multi-indices of order ``k`` (one per distinct tensor entry)."""
    return tuple(itertools.combinations_with_replacement(range(dim), k))


def multiset_exponent(ms: Sequence[int], dim: int) -> tuple[int, ...]:
    e = [0] * dim
    for i in ms:
        e[i] += 1
    return tuple(e)


def multiplicity(ms: Sequence[int]) -> int:
    """Number of ordered index tuples equal to the multiset ``ms``."""
    counts = np.bincount(np.asarray(ms, dtype=int)) if len(ms) else np.array([], int)
    return math.factorial(len(ms)) // int(np.prod([math.factorial(int(c)) for c in counts]))


def monomials(u: np.ndarray, exps) -> np.ndarray:
    """Evaluate monomials ``prod_i u_i^e_i`` for points ``u`` of shape ``(..., dim)``."""
    e = np.asarray(exps)
    maxdeg = int(e.max()) if e.size else 0
    powers = [np.ones(u.shape)]
    for _ in range(maxdeg):
        powers.append(powers[-1] * u)
    out = np.ones(u.shape[:-1] + (len(e),))
    for j, ej in enumerate(e):
        for i, p in enumerate(ej):
            if p:
                out[..., j] *= powers[p][..., i]
    return out


@dataclass(frozen=True)
class LocalFit:
    """Per-sample local polynomial coefficients.

    ``coefficients`` has shape ``(n, r, M)``: response ``r`` and monomial
    ``M`` in the graded order of :func:`monomial_exponents`, expressed in
    coordinates centered at each sample, so ``alpha! * b_alpha`` is the
    partial derivative of multi-index ``alpha`` at that sample.
    """

    coefficients: np.ndarray
    exponents: tuple
    n_neighbors: int
    worst_condition: float

    def derivative_tensor(self, k: int) -> np.ndarray:
        """Order-k derivatives indexed by :func:`multisets`, shape ``(n, r, n_ms)``."""
        dim = len(self.exponents[0])
        index = {e: j for j, e in enumerate(self.exponents)}
        cols = []
        facts = []
        for ms in multisets(dim, k):
            e = multiset_exponent(ms, dim)
            if e not in index:
                raise ValueError(f"order {k} exceeds the fitted degree")
            cols.append(index[e])
            facts.append(np.prod([math.factorial(p) for p in e]))
        return self.coefficients[:, :, cols] * np.asarray(facts, dtype=float)


def default_neighbors(n: int, n_monomials: int, fraction: float = 0.04) -> int:
    return int(min(n, max(3 * n_monomials, math.ceil(fraction * n))))


def _neighborhoods(X, Q, degree, K, max_condition, chunk):
    """Yield weighted local least-squares systems for blocks of query points.

    Each item is ``(start, idx, Aw, Gs, d, h)``: neighbor indices, weighted
    design matrices, equilibrated normal matrices with their scaling and the
    neighborhood radii.
    """
    exps = monomial_exponents(X.shape[1], degree)
    M = len(exps)
    tree = cKDTree(X)
    for a in range(0, Q.shape[0], chunk):
        q = Q[a : a + chunk]
        dist, idx = tree.query(q, k=K)
        if K == 1:
            dist, idx = dist[:, None], idx[:, None]
        h = dist[:, -1].copy()
        h[h <= 0] = 1.0
        u = (X[idx] - q[:, None, :]) / h[:, None, None]
        A = monomials(u, exps)
        w = np.exp(-2.0 * (dist / h[:, None]) ** 2)
        Aw = A * w[:, :, None]
        G = np.einsum("nkm,nkl->nml", Aw, A)
        # condition after diagonal equilibration
        d = np.sqrt(np.einsum("nmm->nm", G))
        d[d <= 0] = 1.0
        Gs = G / d[:, :, None] / d[:, None, :]
        ev = np.linalg.eigvalsh(Gs)
        cond = ev[:, -1] / np.maximum(ev[:, 0], 1e-300)
        if np.any(cond > max_condition):
            bad = int(np.sum(cond > max_condition))
            raise RegressionError(
                f"rank-deficient local regression: {bad} of {len(q)} neighborhoods in this block have "
                f"condition number above {max_condition:.1e} (worst {cond.max():.2e}; K={K}, monomials={M})"
            )
        yield a, idx, Aw, Gs, d, h, float(cond.max())


def _check_sizes(X, degree, n_neighbors, fraction):
    n, dim = X.shape
    M = len(monomial_exponents(dim, degree))
    K = default_neighbors(n, M, fraction) if n_neighbors is None else int(n_neighbors)
    K = max(K, 3 * M)
    if K > n:
        raise RegressionError(
            f"neighborhood needs {K} samples (3 x {M} monomials) but only {n} are available"
        )
    return K


def local_polynomial_fit(
    X,
    Y,
    degree: int,
    n_neighbors: int | None = None,
    fraction: float = 0.04,
    max_condition: float = 1e12,
    chunk: int = 1024,
    query_points=None,
) -> LocalFit:
    """Gaussian-weighted local polynomial regression of ``Y`` on ``X``.

    For each query point the ``n_neighbors`` nearest samples (at least three
    times the monomial count) are fitted with all monomials of the centered
    state up to ``degree``.  Distances are scaled by the distance to the
    farthest neighbor ``h`` and weighted by ``exp(-2 (d/h)^2)``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    n, dim = X.shape
    if Y.shape[0] != n:
        raise ValueError("driver and response have different sample counts")
    exps = monomial_exponents(dim, degree)
    K = _check_sizes(X, degree, n_neighbors, fraction)
    Q = X if query_points is None else np.asarray(query_points, dtype=float).reshape(-1, dim)
    coefs = np.empty((Q.shape[0], Y.shape[1], len(exps)))
    deg = np.array([sum(e) for e in exps])
    worst = 0.0
    for a, idx, Aw, Gs, d, h, cond in _neighborhoods(X, Q, degree, K, max_condition, chunk):
        worst = max(worst, cond)
        rhs = np.einsum("nkm,nkr->nmr", Aw, Y[idx])
        sol = np.linalg.solve(Gs, rhs / d[:, :, None]) / d[:, :, None]
        # back to unscaled coordinates: coefficient of u^alpha carries h^|alpha|
        coefs[a : a + len(idx)] = np.transpose(sol, (0, 2, 1)) / h[:, None, None] ** deg
    return LocalFit(coefs, exps, K, worst)


def global_fit_operator(X, degree: int, targets: Sequence[Sequence[int]], weights) -> np.ndarray:
    """Derivatives of a weighted global polynomial fit as a linear map on the response.

    The response is regressed on all monomials of ``X`` up to ``degree``
    with sample weights ``weights``.  Returns ``L`` of shape
    ``(len(targets), n)`` such that ``L @ y`` is the partial derivative for
    each target multiset at the origin, i.e. ``alpha!`` times the fitted
    coefficient.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, dim = X.shape
    w = np.asarray(weights, dtype=float)
    exps = monomial_exponents(dim, degree)
    index = {e: j for j, e in enumerate(exps)}
    A = monomials(X, exps)
    if n < 3 * len(exps):
        raise RegressionError(f"{n} samples cannot support {len(exps)} monomials")
    Aw = A * w[:, None]
    G = A.T @ Aw
    d = np.sqrt(np.diag(G))
    d[d <= 0] = 1.0
    Gs = G / np.outer(d, d)
    cond = np.linalg.cond(Gs)
    if cond > 1e12:
        raise RegressionError(f"global polynomial regression is rank deficient (condition {cond:.2e})")
    rows, facts = [], []
    for ms in targets:
        e = multiset_exponent(ms, dim)
        if e not in index:
            raise ValueError(f"multiset {tuple(ms)} exceeds the fitted degree")
        rows.append(index[e])
        facts.append(float(np.prod([math.factorial(p) for p in e])))
    ginv = np.linalg.solve(Gs, np.eye(len(exps)))[rows] / d[rows][:, None] / d[None, :]
    return (ginv @ Aw.T) * np.asarray(facts)[:, None]


def state_space_gradient(
    driver,
    response_dot,
    k: int,
    degree: int | None = None,
    n_neighbors: int | None = None,
    fraction: float = 0.04,
) -> np.ndarray:
    """Order-k gradient of the response tendency with respect to the driver state.

    Parameters
    ----------
    driver : array, shape (n, d)
        Driver states per sample.
    response_dot : array, shape (n, r)
        Response tendencies at the same samples.
    k : int
        Derivative order.
    degree : int, optional
        Local polynomial degree (default ``k``).

    Returns
    -------
    ndarray, shape (n, r, n_ms)
        Derivative entries per sample indexed by :func:`multisets` ``(d, k)``.
    """
    fit = local_polynomial_fit(driver, response_dot, degree or k, n_neighbors, fraction)
    return fit.derivative_tensor(k)
