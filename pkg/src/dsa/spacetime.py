"""
Nonlinear space-time decomposition.

A field ``X(s, t)`` is split into a spatial structure and a temporal
structure.  When space and time are separable the structures are plain
time and space means.  When they coevolve, for example in a travelling
wave, the spatial structure is obtained by averaging along the
characteristics ``s - C t = const`` given by the estimated celerity, and
the temporal structure is the projection of the field onto that spatial
pattern.  The coevolution manifold records the celerity field, the
multi-order space-time couplings and their rank ``c``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .field import (
    Grid,
    SpatioTemporalField,
    TimeAxis,
    _atomic_write_text,
    _fmt,
    write_field,
)
from .numdiff import _uniform_spacing, axis_derivative, time_derivative_array

COUPLING_TOL = 1e-3
GRADIENT_FLOOR = 0.1
MAX_COUPLING_ORDER = 3
AXES = ("lat", "lon")


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """Orthonormal basis over a flattened sample index.

    ``vectors`` has shape ``(n_index, rank)``.  ``label`` says which index
    the basis spans: ``"space"`` (cells), ``"time"`` (time steps) or
    ``"generic"`` (flattened time x cell samples).
    """

    label: str
    vectors: np.ndarray

    def __post_init__(self):
        if self.label not in ("space", "time", "generic"):
            raise ValueError(f"unknown subspace label {self.label!r}")
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        gram = v.T @ v
        if not np.allclose(gram, np.eye(v.shape[1]), atol=1e-10, rtol=0):
            raise ValueError("basis vectors are not orthonormal")
        object.__setattr__(self, "vectors", v)

    @property
    def rank(self) -> int:
        return self.vectors.shape[1]

    @property
    def is_full(self) -> bool:
        return self.rank == self.vectors.shape[0]

    @classmethod
    def full(cls, label: str, n_index: int) -> "SubspaceBasis":
        return cls(label, np.eye(n_index))

    @classmethod
    def from_data(cls, a: np.ndarray, label: str, rank: int | None = None, tol: float = 1e-12) -> "SubspaceBasis":
        """Leading singular vectors of ``a`` (time, cells, ...) for the requested index."""
        a = np.asarray(a, dtype=float)
        if label == "space":
            m = np.moveaxis(a, 1, 0).reshape(a.shape[1], -1)
        elif label == "time":
            m = a.reshape(a.shape[0], -1)
        else:
            m = a.reshape(-1, 1)
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        r = int(np.sum(s > tol * max(s[0], 1e-300))) if rank is None else rank
        return cls(label, u[:, : max(r, 1)])

    def project(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection of ``v`` (n_index, ...) onto the span."""
        flat = v.reshape(v.shape[0], -1)
        if self.is_full:
            return v.copy()
        return (self.vectors @ (self.vectors.T @ flat)).reshape(v.shape)


@dataclass(frozen=True, eq=False)
class CoevolutionManifold:
    """Space-time coupling of a field.

    Attributes
    ----------
    rank : int
        Number of shared space-time dimensions ``c``.
    couplings : ndarray, shape (n_orders, 2)
        Normalized coupling per derivative order (rows, from 1) and spatial
        axis (lat, lon); zero for axes that do not vary.
    celerity : ndarray, shape (2, n_lat, n_lon)
        First-order celerity per cell along lat and lon, in grid cells per
        time step.
    r_space, r_time : int
        Number of varying spatial axes and temporal axes.
    spacing : tuple of float
        Grid spacing along (lat, lon) and the time step, for unit conversion.
    raw_couplings, raw_celerity : ndarray
        Estimates before the rank decision zeroed them.
    """

    rank: int
    couplings: np.ndarray
    celerity: np.ndarray
    r_space: int = 0
    r_time: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)
    raw_couplings: np.ndarray | None = None
    raw_celerity: np.ndarray | None = None
    singular_values: np.ndarray | None = None

    def __post_init__(self):
        if self.rank < 0 or self.rank > min(self.r_space, self.r_time):
            raise ValueError(f"coevolution rank {self.rank} exceeds min(r_s, r_t) = {min(self.r_space, self.r_time)}")
        if self.rank == 0 and (np.any(np.abs(self.couplings) > 1e-10) or np.any(self.celerity != 0)):
            raise ValueError("a rank-0 manifold carries no couplings or celerity")

    @classmethod
    def separable(cls, grid_shape, r_space: int = 0, r_time: int = 0) -> "CoevolutionManifold":
        return cls(0, np.zeros((MAX_COUPLING_ORDER, 2)), np.zeros((2,) + tuple(grid_shape)), r_space, r_time)

    @property
    def grid_shape(self):
        return self.celerity.shape[1:]

    def phase_speed(self, axis: str = "lon") -> float:
        """Median celerity along an axis in coordinate units per time unit."""
        a = AXES.index(axis)
        c = self.raw_celerity if self.raw_celerity is not None else self.celerity
        vals = c[a][np.isfinite(c[a])]
        if vals.size == 0:
            return 0.0
        return float(np.median(vals)) * self.spacing[a] / self.spacing[2]

    def to_text(self) -> str:
        lines = [f"c {self.rank}", f"r_space {self.r_space}", f"r_time {self.r_time}"]
        for k, row in enumerate(self.couplings, start=1):
            lines.append(f"coupling {k} " + " ".join(_fmt(v) for v in row))
        for a, name in enumerate(AXES):
            for i, row in enumerate(self.celerity[a]):
                lines.append(f"celerity {name} {i} " + " ".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class StructurePair:
    """Spatial and temporal structures of one field component.

    ``spatial`` is ``(n_lat, n_lon)``, ``temporal`` is ``(n_time,)``; both
    are standardized, with their affine transforms in ``spatial_affine``
    and ``temporal_affine`` as ``(mean, std)``.  ``xs``, ``xt`` and ``core``
    hold the full factorization used by :func:`compose`.
    """

    spatial: np.ndarray
    temporal: np.ndarray
    manifold: CoevolutionManifold
    spatial_affine: tuple
    temporal_affine: tuple
    xs: np.ndarray
    xt: np.ndarray
    core: np.ndarray
    grid: Grid
    time: TimeAxis
    residual: float

    @property
    def dimension(self) -> int:
        """Composed dimensionality ``r_s + r_t - c``."""
        m = self.manifold
        return m.r_space + m.r_time - m.rank

    def write(self, directory) -> None:
        """Spatial part as csv-grid, temporal part as ``timestamp value`` lines, manifold as flat text."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        snap = SpatioTemporalField(self.grid, self.time[:1], self.spatial[None])
        write_field(snap, d / "spatial.csv", "csv-grid")
        _atomic_write_text(
            d / "temporal.txt",
            "".join(f"{_fmt(t)} {_fmt(v)}\n" for t, v in zip(self.time.timestamps, self.temporal)),
        )
        _atomic_write_text(d / "manifold.txt", self.manifold.to_text())


# ---------------------------------------------------------------------------
# Coevolution


def _varying_axes(v: np.ndarray, coords) -> list[int]:
    """Spatial axes with at least five points and variation along them."""
    scale = np.max(np.abs(v)) if v.size else 0.0
    out = []
    for a in (0, 1):
        if coords[a].size < 5:
            continue
        if np.max(np.abs(np.diff(v, axis=a + 1))) > 1e-12 * max(scale, 1e-300):
            out.append(a)
    return out


def _rms(a) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def estimate_coevolution(
    x: SpatioTemporalField,
    component: int = 0,
    max_order: int = MAX_COUPLING_ORDER,
    tol: float = COUPLING_TOL,
) -> CoevolutionManifold:
    """Estimate celerity, multi-order couplings and coevolution rank.

    The celerity along axis ``a`` is ``-X_t / X_a`` per sample where
    ``|X_a|`` exceeds a tenth of its maximum, reduced by the per-cell
    median.  The order-k coupling along ``a`` is the normalized defect of
    separability

        ``rms(X d_a^k d_t^k X - d_a^k X d_t^k X) /
        (rms(X) rms(d_a^k d_t^k X) + rms(d_a^k X) rms(d_t^k X))``,

    which vanishes exactly for ``g(s) h(t)``.  The rank is the number of
    singular values of the first-order coupling matrix (spatial axes x
    time) above ``tol``.
    """
    if x.has_missing:
        raise ValueError("field has missing values; run fill() first")
    v = x.values[component]
    n, nlat, nlon = v.shape
    if n < 8:
        raise ValueError("time axis shorter than 8 steps")
    coords = (x.grid.lat_values, x.grid.lon_values)
    dt = x.time.step
    axes = _varying_axes(v, coords)
    spacing = tuple(_uniform_spacing(coords[a]) if a in axes else 1.0 for a in (0, 1)) + (dt,)
    varies_in_time = bool(np.max(np.abs(np.diff(v, axis=0))) > 1e-12 * max(np.max(np.abs(v)), 1e-300))
    r_s, r_t = len(axes), int(varies_in_time)
    grid_shape = (nlat, nlon)
    if not axes or not varies_in_time:
        if np.max(np.abs(v)) == 0 or np.ptp(v) == 0:
            warnings.warn("flat field: no gradients, coevolution rank set to 0", RuntimeWarning, stacklevel=2)
        return CoevolutionManifold.separable(grid_shape, r_s, r_t)

    flat = v.reshape(n, -1)
    td = time_derivative_array(flat[None], dt, max_order, detect=False).derivs[:, 0]
    td = td.reshape((max_order, n, nlat, nlon))
    couplings = np.zeros((max_order, 2))
    celerity = np.zeros((2,) + grid_shape)
    for a in axes:
        xa1 = None
        for k in range(1, max_order + 1):
            xa = axis_derivative(v, spacing[a], k, axis=a + 1)
            xat = axis_derivative(td[k - 1], spacing[a], k, axis=a + 1)
            xt = td[k - 1]
            num = _rms(v * xat - xa * xt)
            den = _rms(v) * _rms(xat) + _rms(xa) * _rms(xt)
            couplings[k - 1, a] = num / den if den > 0 else 0.0
            if k == 1:
                xa1 = xa
        xt1 = td[0]
        mask = np.abs(xa1) > GRADIENT_FLOOR * np.max(np.abs(xa1))
        ratio = np.where(mask, -xt1 / np.where(mask, xa1, 1.0), np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(ratio, axis=0)
        celerity[a] = np.nan_to_num(med, nan=0.0) * dt / spacing[a]

    sv = np.linalg.svd(couplings[:1].T[axes], compute_uv=False)
    c = int(np.sum(sv > tol))
    if c == 0:
        return CoevolutionManifold(
            0, np.zeros_like(couplings), np.zeros_like(celerity), r_s, r_t, spacing, couplings, celerity, sv
        )
    return CoevolutionManifold(c, couplings, celerity, r_s, r_t, spacing, couplings, celerity, sv)


# ---------------------------------------------------------------------------
# Contractions


def characteristic_average(a: np.ndarray, manifold: CoevolutionManifold, t0: int = 0) -> np.ndarray:
    """Average ``a (time, lat, lon, ...)`` along characteristics through time ``t0``.

    The value at cell ``(i, j)`` is the mean over ``t`` of ``a[t]`` sampled
    at ``(i, j) + C (t - t0)`` with linear interpolation.  Only positions
    inside the grid contribute; reflecting a travelling pattern at the
    boundary would reverse its phase.
    """
    a = np.asarray(a, dtype=float)
    n, nlat, nlon = a.shape[:3]
    extra = a.shape[3:]
    flat = a.reshape(n, nlat, nlon, -1)
    ii, jj = np.meshgrid(np.arange(nlat, dtype=float), np.arange(nlon, dtype=float), indexing="ij")
    out = np.zeros((nlat, nlon, flat.shape[-1]))
    count = np.zeros((nlat, nlon))
    eps = 1e-9
    for t in range(n):
        pos = np.array([ii + manifold.celerity[0] * (t - t0), jj + manifold.celerity[1] * (t - t0)])
        inside = (pos[0] >= -eps) & (pos[0] <= nlat - 1 + eps) & (pos[1] >= -eps) & (pos[1] <= nlon - 1 + eps)
        if not inside.any():
            continue
        count += inside
        for e in range(flat.shape[-1]):
            vals = map_coordinates(flat[t, :, :, e], pos, order=1, mode="nearest")
            out[:, :, e] += np.where(inside, vals, 0.0)
    return (out / np.maximum(count, 1)[:, :, None]).reshape((nlat, nlon) + extra)


def retrieval_product(
    a: np.ndarray,
    b: SubspaceBasis,
    manifold: CoevolutionManifold | None = None,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Retrieve the ``b``-structure of a field or tensor stream ``a``.

    ``a`` has shape ``(time, cells, ...)``.  For a ``"space"`` basis the
    time index is contracted (plain mean when ``c = 0``, characteristic
    average otherwise) and the result is projected onto ``span(b)`` over
    cells.  A ``"time"`` basis contracts the cells with area weights and
    projects onto ``span(b)`` over time.  A ``"generic"`` basis projects the
    flattened samples directly.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2:
        raise ValueError("retrieval needs a (time, cells, ...) array")
    n, ncell = a.shape[:2]
    if b.label == "generic":
        flat = a.reshape(n * ncell, -1)
        if b.vectors.shape[0] != n * ncell:
            raise ValueError("generic basis does not match the sample count")
        return b.project(flat).reshape(a.shape)
    if b.label == "space":
        if b.vectors.shape[0] != ncell:
            raise ValueError(f"spatial basis has {b.vectors.shape[0]} cells, field has {ncell}")
        if manifold is None or manifold.rank == 0:
            red = a.mean(axis=0)
        else:
            shp = manifold.grid_shape
            if shp[0] * shp[1] != ncell:
                raise ValueError("manifold grid does not match the field")
            red = characteristic_average(a.reshape((n,) + tuple(shp) + a.shape[2:]), manifold).reshape(a.shape[1:])
        return b.project(red)
    if b.vectors.shape[0] != n:
        raise ValueError(f"temporal basis has {b.vectors.shape[0]} steps, field has {n}")
    w = np.full(ncell, 1.0 / ncell) if weights is None else np.asarray(weights, dtype=float).ravel() / np.sum(weights)
    red = np.tensordot(a, w, axes=([1], [0])) if a.ndim == 2 else np.einsum("tc...,c->t...", a, w)
    return b.project(red)


# ---------------------------------------------------------------------------
# Decomposition and composition


def _rotated_basis(u: np.ndarray, lead: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``span(u)`` whose first column is along ``lead``."""
    r = u.shape[1]
    a = u.T @ lead
    na = np.linalg.norm(a)
    if na <= 1e-300:
        return u
    q, _ = np.linalg.qr(np.column_stack([a / na, np.eye(r)]))
    q = q[:, :r]
    if q[:, 0] @ a < 0:
        q = -q
    return u @ q


def _standardize_vec(v: np.ndarray) -> tuple[np.ndarray, tuple]:
    m = float(np.mean(v))
    s = float(np.std(v))
    if s <= 1e-12 * max(float(np.max(np.abs(v))), 1e-300):
        return v.copy(), (m, 0.0)
    return (v - m) / s, (m, s)


def decompose(
    x: SpatioTemporalField,
    manifold: CoevolutionManifold | None = None,
    component: int = 0,
) -> StructurePair:
    """Split one component of ``x`` into spatial and temporal structures.

    The data matrix ``S`` (cells x time, rows scaled by the square root of
    the area weights) is factored on its numerical rank.  The canonical
    spatial pattern is the time mean when ``c = 0`` and the characteristic
    average when ``c >= 1``; the canonical temporal pattern is the
    area-weighted space mean when ``c = 0`` and the projection of the field
    onto the spatial pattern otherwise.  Both are used as leading vectors
    of orthonormal bases of the row and column spaces, so the composition
    ``S E_t K^-1 E_s^T S`` returns ``S`` exactly.
    """
    if manifold is None:
        manifold = estimate_coevolution(x, component)
    v = x.values[component]
    n, nlat, nlon = v.shape
    if manifold.grid_shape != (nlat, nlon):
        raise ValueError("manifold grid does not match the field")
    w = x.grid.cell_area_weights.ravel()
    sw = np.sqrt(w)
    S = v.reshape(n, -1).T
    Sw = S * sw[:, None]
    u, s, vt = np.linalg.svd(Sw, full_matrices=False)
    tol = max(Sw.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    r = int(np.sum(s > tol))

    if manifold.rank == 0:
        p = S.mean(axis=1)
        h = S.T @ w
    else:
        p = characteristic_average(v, manifold).ravel()
        pw = p * sw
        npw = np.linalg.norm(pw)
        h = Sw.T @ (pw / npw) if npw > 0 else S.T @ w
    if r == 0:
        xs = np.zeros((S.shape[0], 0))
        xt = np.zeros((n, 0))
        core = np.zeros((0, 0))
        residual = 0.0
    else:
        U, V = u[:, :r], vt[:r].T
        pw = U @ (U.T @ (p * sw))
        if np.linalg.norm(pw) <= 1e-12 * np.linalg.norm(p * sw):
            pw = U[:, 0]
        hv = V @ (V.T @ h)
        if np.linalg.norm(hv) <= 1e-12 * max(np.linalg.norm(h), 1e-300):
            hv = V[:, 0]
        Es = _rotated_basis(U, pw)
        Et = _rotated_basis(V, hv)
        xs = Sw @ Et
        xt = Sw.T @ Es
        core = Es.T @ Sw @ Et
        approx = (U * s[:r]) @ vt[:r]
        residual = float(np.linalg.norm(Sw - approx) / max(np.linalg.norm(Sw), 1e-300))
    spatial, sa = _standardize_vec(p)
    temporal, ta = _standardize_vec(h)
    return StructurePair(
        spatial.reshape(nlat, nlon), temporal, manifold, sa, ta, xs, xt, core, x.grid, x.time, residual
    )


def compose(p: StructurePair) -> SpatioTemporalField:
    """Rebuild the field from its structures: ``X_s K^-1 X_t^T``."""
    r = p.core.shape[0]
    if p.xs.shape[1] != r or p.xt.shape[1] != r:
        raise ValueError("structure ranks do not match the core")
    nlat, nlon = p.grid.shape
    if r == 0:
        S = np.zeros((nlat * nlon, len(p.time)))
    else:
        Sw = p.xs @ np.linalg.solve(p.core, p.xt.T)
        S = Sw / np.sqrt(p.grid.cell_area_weights.ravel())[:, None]
    return SpatioTemporalField(p.grid, p.time, S.T.reshape(len(p.time), nlat, nlon))


def relative_rms(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean((a - b) ** 2)) / max(np.sqrt(np.mean(b**2)), 1e-300))
