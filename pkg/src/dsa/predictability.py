"""
Dynamic predictability of a predictand field from dynamic sources.

For every grid cell the order-k interaction of the predictand tendency with
the sources is aggregated over the reference manifold and normalized by the
response of a pure k-th order link ``He_k(x_i) / sqrt(k!)`` (``He_k`` the
probabilists' Hermite polynomial).  For k = 1 the normalizer is the
source's own first-order self-interaction.  The result ``N^k`` is one for
full redundancy and zero for dynamic independence.

Because the local regression is linear in the response, the aggregate is a
fixed linear functional of the predictand tendency.  Cyclic-shift nulls are
therefore evaluated for all shifts at once by circular cross-correlation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import eval_hermitenorm

from .field import Partition, PartitionMember, SpatioTemporalField, TimeAxis, field_series, write_field
from .infostats import seeds_for
from .interaction import reference_weights
from .numdiff import detect_jumps, global_fit_operator, time_derivative_array

PINV_THRESHOLD = 1e-10
CLIP_WARN_FRACTION = 0.01
CLIP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PredictabilityMap:
    """Normalized codependence ``N^k`` per source and cell.

    Arrays have shape ``(m, n_lat, n_lon)``.  ``effective`` is
    ``raw - null_mean``.
    """

    order: int
    raw: np.ndarray
    null_mean: np.ndarray
    null_q95: np.ndarray
    null_sd: np.ndarray
    n_shuffles: int
    clip_count: int
    grid: object
    seed: object = 0

    @property
    def effective(self) -> np.ndarray:
        return self.raw - self.null_mean

    @property
    def above_null(self) -> np.ndarray:
        return self.raw > self.null_q95

    def write(self, directory, prefix: str = "pred") -> list[Path]:
        """Write ``.raw``, ``.null``, ``.q95`` and ``.eff`` csv-grids per source."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        t = TimeAxis([0.0])
        for i in range(self.raw.shape[0]):
            for tag, arr in (("raw", self.raw), ("null", self.null_mean), ("q95", self.null_q95), ("eff", self.effective)):
                path = d / f"{prefix}_k{self.order}_s{i}.{tag}.csv"
                write_field(SpatioTemporalField(self.grid, t, arr[i][None]), path, "csv-grid")
                written.append(path)
        return written


def _source_series(x) -> np.ndarray:
    if hasattr(x, "sources"):
        x = x.sources
    if isinstance(x, SpatioTemporalField):
        return field_series(x)
    a = np.asarray(x, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _standardize_columns(a: np.ndarray, what: str) -> np.ndarray:
    sd = a.std(axis=0)
    if np.any(sd <= 0):
        raise ValueError(f"{what} has a constant column")
    return (a - a.mean(axis=0)) / sd


@dataclass(frozen=True)
class _Operator:
    """Aggregation functionals on the valid samples of one window."""

    ell: np.ndarray
    ref: np.ndarray
    ref_terms: np.ndarray
    valid: np.ndarray
    jumps: np.ndarray


def _operator(xs: np.ndarray, step: float, k: int, n_neighbors=None) -> _Operator:
    m = xs.shape[1]
    td = time_derivative_array(xs.T[:, :, None], step, 1)
    valid = td.valid[0, :, :, 0].all(axis=0)
    xdot = td.derivs[0, :, valid, 0]
    xv = xs[valid]
    w = reference_weights(xdot)
    ell = global_fit_operator(xv, k, [(i,) * k for i in range(m)], w)
    # response of a pure order-k link of each source, differentiated with the same stencils
    href = eval_hermitenorm(k, xs) / math.sqrt(math.factorial(k))
    rd = time_derivative_array(href.T[:, :, None], step, 1, jumps=td.jumps[:, 0]).derivs[0, :, valid, 0]
    terms = ell * rd.T
    return _Operator(ell, terms.sum(axis=1), terms, valid, td.jumps[:, 0])


def _normalize(values: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """``values / ref`` with ``ref`` broadcast from the left; tiny normalizers give 0."""
    ref = ref.reshape(ref.shape + (1,) * (values.ndim - ref.ndim))
    inv = np.where(np.abs(ref) > PINV_THRESHOLD, 1.0 / np.where(ref == 0, 1.0, ref), 0.0)
    return values * inv


def _window_map(xs, z, step, k, shuffles, rng, n_neighbors):
    op = _operator(xs, step, k, n_neighbors)
    # the predictand's own discontinuities get one-sided stencils as well
    jumps = detect_jumps(z) | op.jumps[:, None]
    td = time_derivative_array(z[None], step, 1, jumps=jumps)
    zvalid = td.valid[0, 0][op.valid]
    zd = np.where(zvalid, td.derivs[0, 0][op.valid], 0.0)
    # numerator and normalizer run over the same samples of each cell
    mask = zvalid.astype(float)
    raw = _normalize(op.ell @ zd, op.ref_terms @ mask)
    if shuffles <= 0:
        nan = np.full_like(raw, np.nan)
        return op.ref, raw, nan, nan, nan
    n = zd.shape[0]
    shifts = rng.integers(1, n, size=shuffles)
    null = _normalize(_null_from_shifts(op.ell, zd, shifts), _null_from_shifts(op.ref_terms, mask, shifts))
    null = np.clip(null, -1.0, 1.0)
    return op.ref, raw, null.mean(axis=0), np.quantile(null, 0.95, axis=0), null.std(axis=0, ddof=1)


def _null_from_shifts(ell: np.ndarray, zd: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """``out[r, i, c] = ell[i] . roll(zd, shifts[r])[:, c]`` via the FFT."""
    n = zd.shape[0]
    # roll(zd, s)[n'] = zd[n' - s]; sum_n' ell[n'] zd[n' - s] is a circular cross-correlation
    corr = np.fft.irfft(np.conj(np.fft.rfft(zd, axis=0))[None] * np.fft.rfft(ell, axis=1)[:, :, None], n=n, axis=1)
    return np.transpose(corr[:, shifts, :], (1, 0, 2))


def predictability_map(
    x,
    z: SpatioTemporalField,
    k: int = 1,
    window: Partition | None = None,
    shuffles: int = 1000,
    seed=0,
    n_neighbors: int | None = None,
) -> PredictabilityMap:
    """Order-k predictability of ``z`` from the sources ``x`` per grid cell.

    Parameters
    ----------
    x : DynamicSourceSet, SpatioTemporalField or array (n_time, m)
        Sources; they are standardized here.
    z : SpatioTemporalField
        Single-component predictand on the analysis grid, filled.
    k : int
        Interaction order.
    window : Partition, optional
        Members are evaluated independently and their maps averaged per
        cell; the default is the whole record.
    shuffles : int
        Cyclic-shift null replicates (0 disables the null).
    """
    xs_all = _standardize_columns(_source_series(x), "sources")
    if z.has_missing:
        raise ValueError("predictand has missing values; run fill() first")
    if xs_all.shape[0] != z.n_time:
        raise ValueError("sources and predictand do not share a time axis")
    if z.n_components != 1:
        raise ValueError("predictand must have a single component")
    nlat, nlon = z.grid.shape
    m = xs_all.shape[1]
    members = window.members if window is not None else (PartitionMember(0, z.n_time, 0, nlat, 0, nlon),)
    acc = np.zeros((4, m, nlat, nlon))
    count = np.zeros((nlat, nlon))
    clips = 0
    rngs = seeds_for(seed, len(members))
    for mem, rng in zip(members, rngs):
        zc = z.values[0, mem.time_slice, mem.lat_slice, mem.lon_slice]
        shp = zc.shape[1:]
        zflat = zc.reshape(zc.shape[0], -1)
        sd = zflat.std(axis=0)
        zstd = np.where(sd > 0, (zflat - zflat.mean(axis=0)) / np.where(sd > 0, sd, 1.0), 0.0)
        xs = _standardize_columns(xs_all[mem.time_slice], "sources")
        ref, raw, mean, q95, nsd = _window_map(xs, zstd, z.time.step, k, shuffles, rng, n_neighbors)
        if np.all(np.abs(ref) <= PINV_THRESHOLD):
            raise ValueError("all diagonal normalizers vanish")
        clips += int(np.sum(np.abs(raw) > 1.0 + CLIP_TOL))
        raw = np.clip(raw, -1.0, 1.0)
        for j, arr in enumerate((raw, mean, q95, nsd)):
            acc[j][:, mem.lat_slice, mem.lon_slice] += arr.reshape((m,) + shp)
        count[mem.lat_slice, mem.lon_slice] += 1
    acc /= np.maximum(count, 1)
    n_cells_total = m * sum(int(np.prod(z.values[0, 0, mm.lat_slice, mm.lon_slice].shape)) for mm in members)
    if clips > CLIP_WARN_FRACTION * n_cells_total:
        warnings.warn(
            f"{clips} of {n_cells_total} cell values clipped to [-1, 1]; check the normalization threshold",
            RuntimeWarning,
            stacklevel=2,
        )
    return PredictabilityMap(k, acc[0], acc[1], acc[2], acc[3], shuffles, clips, z.grid, seed)


def aggregate_correlation(pmap: PredictabilityMap, weights: np.ndarray | None = None) -> float:
    """Area-weighted integral of a first-order map as a correlation in [-1, 1].

    With one source this is the weighted mean of ``N^1``.  With several the
    per-source integrals form a vector whose norm is returned, signed by its
    dominant entry.
    """
    if pmap.order != 1:
        raise ValueError("aggregate correlation is defined for first-order maps")
    w = pmap.grid.cell_area_weights if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    a = np.einsum("mij,ij->m", pmap.raw, w)
    if a.size == 1:
        return float(a[0])
    return float(np.linalg.norm(a) * np.sign(a[np.argmax(np.abs(a))]))
