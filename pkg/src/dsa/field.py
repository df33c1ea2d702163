"""
Gridded spatiotemporal fields, file formats and preprocessing.

A field stores values indexed ``(component, time, lat, lon)`` together with a
boolean mask of missing entries.  All objects are immutable: arrays are copied
on construction and marked read-only, and every operation returns a new
object.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MISSING = -9999.0
MAGIC = "DSAFIELD v1"


class FieldFormatError(ValueError):
    """Raised when a field file cannot be parsed."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _strictly_monotone(v):
    d = np.diff(v)
    return bool(np.all(d > 0) or np.all(d < 0))


@dataclass(frozen=True, eq=False)
class Grid:
    """Latitude/longitude grid with normalized cos(latitude) area weights.

    Parameters
    ----------
    lat_values, lon_values : sequence of float
        Strictly monotone axes in degrees, at least two points each.
    cell_area_weights : array_like, optional
        Weights of shape ``(n_lat, n_lon)``.  Defaults to cos(lat) broadcast
        over longitude.  Always renormalized to sum to one.
    """

    lat_values: np.ndarray
    lon_values: np.ndarray
    cell_area_weights: np.ndarray = None

    def __post_init__(self):
        lat = _frozen(self.lat_values)
        lon = _frozen(self.lon_values)
        for name, ax in (("lat", lat), ("lon", lon)):
            if ax.ndim != 1 or ax.size < 2:
                raise ValueError(f"{name} axis needs at least 2 points")
            if not np.all(np.isfinite(ax)):
                raise ValueError(f"{name} axis has non-finite values")
            if not _strictly_monotone(ax):
                raise ValueError(f"{name} axis is not strictly monotone")
        if self.cell_area_weights is None:
            w = np.clip(np.cos(np.deg2rad(lat)), 0.0, None)[:, None] * np.ones(lon.size)
        else:
            w = np.array(self.cell_area_weights, dtype=float)
            if w.shape != (lat.size, lon.size):
                raise ValueError("cell_area_weights shape does not match the axes")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("cell_area_weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("cell_area_weights sum to zero")
        object.__setattr__(self, "lat_values", lat)
        object.__setattr__(self, "lon_values", lon)
        object.__setattr__(self, "cell_area_weights", _frozen(w / total))

    @property
    def shape(self):
        return (self.lat_values.size, self.lon_values.size)

    @property
    def n_cells(self):
        return self.lat_values.size * self.lon_values.size

    def subgrid(self, lat_slice: slice, lon_slice: slice) -> "Grid":
        """Grid restricted to a box; weights are recomputed from latitude."""
        return Grid(self.lat_values[lat_slice], self.lon_values[lon_slice])

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and np.array_equal(self.lat_values, other.lat_values)
            and np.array_equal(self.lon_values, other.lon_values)
            and np.array_equal(self.cell_area_weights, other.cell_area_weights)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TimeAxis:
    """Uniform time axis in days since an arbitrary epoch."""

    timestamps: np.ndarray
    step: float = dc_field(init=False)

    def __post_init__(self):
        t = _frozen(self.timestamps)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("time axis needs at least one timestamp")
        if not np.all(np.isfinite(t)):
            raise ValueError("time axis has non-finite values")
        if t.size == 1:
            step = 1.0
        else:
            d = np.diff(t)
            if np.any(d <= 0):
                raise ValueError("timestamps are not strictly increasing")
            step = float((t[-1] - t[0]) / (t.size - 1))
            if np.max(np.abs(d - step)) > 1e-9 * abs(step):
                raise ValueError("irregular time axis: spacing not constant")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "step", step)

    @classmethod
    def regular(cls, n: int, step: float = 1.0, start: float = 0.0) -> "TimeAxis":
        return cls(start + step * np.arange(n))

    def __len__(self):
        return self.timestamps.size

    def __getitem__(self, sl: slice) -> "TimeAxis":
        return TimeAxis(self.timestamps[sl])

    def __eq__(self, other):
        return isinstance(other, TimeAxis) and np.array_equal(self.timestamps, other.timestamps)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SpatioTemporalField:
    """Multicomponent field indexed ``(component, time, lat, lon)``."""

    grid: Grid
    time: TimeAxis
    values: np.ndarray
    missing_mask: np.ndarray = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 3:
            v = v[None]
        expected = (len(self.time),) + self.grid.shape
        if v.ndim != 4 or v.shape[1:] != expected or v.shape[0] < 1:
            raise ValueError(f"values shape {v.shape} inconsistent with (comp,) + {expected}")
        if self.missing_mask is None:
            mask = ~np.isfinite(v)
        else:
            mask = np.array(self.missing_mask, dtype=bool, copy=True)
            if mask.ndim == 3:
                mask = mask[None]
            if mask.shape != v.shape:
                raise ValueError("missing_mask shape differs from values shape")
            mask = mask | ~np.isfinite(v)
        v[mask] = np.nan
        v.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "missing_mask", mask)

    @property
    def n_components(self):
        return self.values.shape[0]

    @property
    def n_time(self):
        return self.values.shape[1]

    @property
    def n_cells(self):
        return self.grid.n_cells

    @property
    def has_missing(self):
        return bool(self.missing_mask.any())

    def cell_series(self) -> np.ndarray:
        """Values reshaped to ``(component, time, cell)``."""
        return self.values.reshape(self.n_components, self.n_time, -1)

    def with_values(self, values, time: TimeAxis | None = None, missing_mask=None) -> "SpatioTemporalField":
        return SpatioTemporalField(self.grid, self.time if time is None else time, values, missing_mask)

    def select_time(self, sl: slice) -> "SpatioTemporalField":
        return SpatioTemporalField(self.grid, self.time[sl], self.values[:, sl], self.missing_mask[:, sl])

    def select_box(self, lat_slice: slice, lon_slice: slice) -> "SpatioTemporalField":
        return SpatioTemporalField(
            self.grid.subgrid(lat_slice, lon_slice),
            self.time,
            self.values[:, :, lat_slice, lon_slice],
            self.missing_mask[:, :, lat_slice, lon_slice],
        )


def series_field(series, time: TimeAxis | None = None, step: float = 1.0) -> SpatioTemporalField:
    """Wrap time series of shape ``(n_time, m)`` as an m-component field.

    The series are placed on a minimal 2 x 2 grid with identical values in
    every cell, which keeps the grid invariants while representing
    point-like processes such as extracted sources.
    """
    s = np.asarray(series, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n, m = s.shape
    if time is None:
        time = TimeAxis.regular(n, step)
    grid = Grid([0.0, 1.0], [0.0, 1.0])
    vals = np.broadcast_to(s.T[:, :, None, None], (m, n, 2, 2))
    return SpatioTemporalField(grid, time, vals)


def field_series(f: SpatioTemporalField) -> np.ndarray:
    """Area-weighted spatial mean of every component, shape ``(n_time, m)``."""
    w = f.grid.cell_area_weights
    return np.einsum("ctij,ij->tc", f.values, w)


# ---------------------------------------------------------------------------
# File formats


def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_floats(line: str, lineno: int) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in line.replace(",", " ").split()], dtype=float)
    except ValueError as exc:
        raise FieldFormatError(f"line {lineno}: cannot parse number ({exc})") from None


def read_field(path, format: str = "column-text") -> SpatioTemporalField:
    """Read a field from ``column-text`` or ``csv-grid`` files.

    Values equal to -9999.0 are marked missing.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if format == "column-text":
        return _read_column_text(path)
    if format == "csv-grid":
        return _read_csv_grid(path)
    raise ValueError(f"unknown field format {format!r}")


def write_field(f: SpatioTemporalField, path, format: str = "column-text") -> None:
    """Write a field; the inverse of :func:`read_field` bit for bit."""
    if format == "column-text":
        _write_column_text(f, Path(path))
    elif format == "csv-grid":
        _write_csv_grid(f, Path(path))
    else:
        raise ValueError(f"unknown field format {format!r}")


def _read_column_text(path: Path) -> SpatioTemporalField:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FieldFormatError(f"line 1: expected header {MAGIC!r}")
    if len(lines) < 5:
        raise FieldFormatError(f"line {len(lines) + 1}: truncated header")
    dims = _parse_floats(lines[1], 2)
    if dims.size != 4 or np.any(dims != np.round(dims)) or np.any(dims < 1):
        raise FieldFormatError("line 2: expected four positive integers")
    nc, nt, nlat, nlon = (int(d) for d in dims)
    lat = _parse_floats(lines[2], 3)
    lon = _parse_floats(lines[3], 4)
    ts = _parse_floats(lines[4], 5)
    for lineno, arr, n, name in ((3, lat, nlat, "lat"), (4, lon, nlon, "lon"), (5, ts, nt, "time")):
        if arr.size != n:
            raise FieldFormatError(f"line {lineno}: {name} axis has {arr.size} values, header says {n}")
    body = [ln for ln in lines[5:]]
    while body and not body[-1].strip():
        body.pop()
    total = nc * nt * nlat * nlon
    if len(body) != total:
        raise FieldFormatError(f"line {6 + min(len(body), total)}: expected {total} value rows, found {len(body)}")
    vals = np.empty(total)
    for i, ln in enumerate(body):
        try:
            vals[i] = float(ln)
        except ValueError:
            raise FieldFormatError(f"line {6 + i}: cannot parse value {ln.strip()!r}") from None
    vals = vals.reshape(nc, nt, nlat, nlon)
    mask = vals == MISSING
    try:
        grid = Grid(lat, lon)
        time = TimeAxis(ts)
    except ValueError as exc:
        raise FieldFormatError(f"inconsistent grid: {exc}") from None
    if np.any(~np.isfinite(vals) & ~mask):
        raise FieldFormatError("non-finite value in data rows")
    return SpatioTemporalField(grid, time, vals, mask)


def _write_column_text(f: SpatioTemporalField, path: Path) -> None:
    nc, nt, nlat, nlon = f.values.shape
    vals = np.where(f.missing_mask, MISSING, f.values).ravel()
    parts = [
        MAGIC,
        f"{nc} {nt} {nlat} {nlon}",
        " ".join(_fmt(x) for x in f.grid.lat_values),
        " ".join(_fmt(x) for x in f.grid.lon_values),
        " ".join(_fmt(x) for x in f.time.timestamps),
    ]
    parts.extend(_fmt(x) for x in vals)
    _atomic_write_text(path, "\n".join(parts) + "\n")


def _csv_step_text(lat, lon, timestamp, grid_values, mask) -> str:
    rows = [",".join([_fmt(timestamp)] + [_fmt(x) for x in lon])]
    for i, la in enumerate(lat):
        row = np.where(mask[i], MISSING, grid_values[i])
        rows.append(",".join([_fmt(la)] + [_fmt(x) for x in row]))
    return "\n".join(rows) + "\n"


def _write_csv_grid(f: SpatioTemporalField, path: Path) -> None:
    # A single time step goes to ``path`` itself; longer records become a
    # directory with one file per step.  The top-left cell holds the timestamp.
    if f.n_components != 1:
        raise ValueError("csv-grid holds a single component; write components separately")
    lat, lon = f.grid.lat_values, f.grid.lon_values
    if f.n_time == 1:
        _atomic_write_text(path, _csv_step_text(lat, lon, f.time.timestamps[0], f.values[0, 0], f.missing_mask[0, 0]))
        return
    path.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(f.n_time - 1)))
    for t in range(f.n_time):
        text = _csv_step_text(lat, lon, f.time.timestamps[t], f.values[0, t], f.missing_mask[0, t])
        _atomic_write_text(path / f"step_{t:0{width}d}.csv", text)


def _read_csv_step(path: Path):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if len(lines) < 3:
        raise FieldFormatError(f"{path}: line {len(lines) + 1}: need a header and at least two rows")
    head = _parse_floats(lines[0], 1)
    timestamp, lon = head[0], head[1:]
    lat = []
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        r = _parse_floats(ln, i)
        if r.size != lon.size + 1:
            raise FieldFormatError(f"{path}: line {i}: expected {lon.size + 1} columns, found {r.size}")
        lat.append(r[0])
        rows.append(r[1:])
    return timestamp, np.array(lat), lon, np.array(rows)


def _read_csv_grid(path: Path) -> SpatioTemporalField:
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise FieldFormatError(f"{path}: no csv files")
    steps = [_read_csv_step(p) for p in files]
    _, lat, lon, _ = steps[0]
    for p, (_, la, lo, _) in zip(files, steps):
        if not (np.array_equal(la, lat) and np.array_equal(lo, lon)):
            raise FieldFormatError(f"{p}: inconsistent grid across time steps")
    ts = np.array([s[0] for s in steps])
    vals = np.stack([s[3] for s in steps])[None]
    try:
        grid = Grid(lat, lon)
        time = TimeAxis(ts)
    except ValueError as exc:
        raise FieldFormatError(f"inconsistent grid: {exc}") from None
    return SpatioTemporalField(grid, time, vals, vals == MISSING)


# ---------------------------------------------------------------------------
# Preprocessing


def moving_average(f: SpatioTemporalField, window_days: float) -> SpatioTemporalField:
    """Centered moving mean over non-missing values.

    The window holds ``round(window_days / step)`` time steps; only full
    windows are kept, and each output timestamp is the window center.
    """
    w = int(round(window_days / f.time.step))
    if w < 1:
        raise ValueError("window spans less than one time step")
    if w > f.n_time:
        raise ValueError(f"window of {w} steps is longer than the record ({f.n_time})")
    if w == 1:
        return f
    present = ~f.missing_mask
    x = np.where(present, f.values, 0.0)
    cs = np.concatenate([np.zeros_like(x[:, :1]), np.cumsum(x, axis=1)], axis=1)
    cn = np.concatenate([np.zeros_like(x[:, :1]), np.cumsum(present, axis=1)], axis=1)
    sums = cs[:, w:] - cs[:, :-w]
    counts = cn[:, w:] - cn[:, :-w]
    # cumulative sums lose a few ulps; recompute the window sums directly for
    # short records where it is cheap and keeps constants exact
    if f.n_time * w <= 5_000_000:
        idx = np.arange(f.n_time - w + 1)[:, None] + np.arange(w)
        sums = x[:, idx].sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = sums / counts
    mask = counts == 0
    ts = f.time.timestamps
    centers = np.convolve(ts, np.full(w, 1.0 / w), mode="valid")
    return SpatioTemporalField(f.grid, TimeAxis(centers), out, mask)


@dataclass(frozen=True)
class Standardization:
    """Per-cell affine transform ``z = (x - mean) / std``; arrays ``(comp, lat, lon)``."""

    mean: np.ndarray
    std: np.ndarray

    def invert(self, f: SpatioTemporalField) -> SpatioTemporalField:
        return f.with_values(f.values * self.std[:, None] + self.mean[:, None], missing_mask=f.missing_mask)


def standardize(f: SpatioTemporalField) -> tuple[SpatioTemporalField, Standardization]:
    """Per-cell zero mean and unit (population) variance over time."""
    present = ~f.missing_mask
    n = present.sum(axis=1)
    if np.any(n < 2):
        c, i, j = np.argwhere(n < 2)[0]
        raise ValueError(f"cell (component={c}, lat={i}, lon={j}) has fewer than 2 samples")
    x = np.where(present, f.values, 0.0)
    mean = x.sum(axis=1) / n
    dev = np.where(present, f.values - mean[:, None], 0.0)
    std = np.sqrt((dev**2).sum(axis=1) / n)
    bad = std <= 1e-300
    if np.any(bad):
        c, i, j = np.argwhere(bad)[0]
        raise ValueError(f"zero-variance cell (component={c}, lat={i}, lon={j})")
    z = dev / std[:, None]
    # a second centering pass removes the rounding left by the first one
    m2 = np.where(present, z, 0.0).sum(axis=1) / n
    z = z - m2[:, None]
    s2 = np.sqrt((np.where(present, z, 0.0) ** 2).sum(axis=1) / n)
    z = z / s2[:, None]
    mean = mean + m2 * std
    std = std * s2
    return f.with_values(z, missing_mask=f.missing_mask), Standardization(_frozen(mean), _frozen(std))


def fill(f: SpatioTemporalField) -> SpatioTemporalField:
    """Impute missing values: linear in time per cell, then nearest cell in space.

    Cells with at least one observation are interpolated in time (constant
    extrapolation at the ends).  Cells never observed copy the nearest
    observed cell (great-circle distance on the grid).
    """
    if not f.has_missing:
        return f
    nc, nt, nlat, nlon = f.values.shape
    v = np.array(f.values)
    t = np.arange(nt, dtype=float)
    series = v.reshape(nc, nt, -1)
    mask = f.missing_mask.reshape(nc, nt, -1)
    empty = mask.all(axis=1)
    for c in range(nc):
        for cell in np.flatnonzero(mask[c].any(axis=0) & ~empty[c]):
            ok = ~mask[c, :, cell]
            series[c, ~ok, cell] = np.interp(t[~ok], t[ok], series[c, ok, cell])
    if empty.any():
        lat, lon = np.meshgrid(np.deg2rad(f.grid.lat_values), np.deg2rad(f.grid.lon_values), indexing="ij")
        xyz = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], -1).reshape(-1, 3)
        for c in range(nc):
            donors = np.flatnonzero(~empty[c])
            if donors.size == 0:
                raise ValueError(f"component {c} has no observed values")
            for cell in np.flatnonzero(empty[c]):
                d = np.sum((xyz[donors] - xyz[cell]) ** 2, axis=1)
                series[c, :, cell] = series[c, :, donors[np.argmin(d)]]
    return f.with_values(series.reshape(nc, nt, nlat, nlon), missing_mask=np.zeros_like(f.missing_mask))


# ---------------------------------------------------------------------------
# Partitions


@dataclass(frozen=True)
class PartitionMember:
    """Half-open index window ``[start, stop)`` in time, latitude and longitude."""

    time_start: int
    time_stop: int
    lat_start: int
    lat_stop: int
    lon_start: int
    lon_stop: int

    def __post_init__(self):
        if not (self.time_stop > self.time_start and self.lat_stop > self.lat_start and self.lon_stop > self.lon_start):
            raise ValueError("partition member is empty")

    @property
    def time_slice(self):
        return slice(self.time_start, self.time_stop)

    @property
    def lat_slice(self):
        return slice(self.lat_start, self.lat_stop)

    @property
    def lon_slice(self):
        return slice(self.lon_start, self.lon_stop)


@dataclass(frozen=True)
class Partition:
    members: tuple[PartitionMember, ...]
    stride: int = 1

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("partition has no members")

    def __len__(self):
        return len(self.members)

    @classmethod
    def whole(cls, f: SpatioTemporalField) -> "Partition":
        nlat, nlon = f.grid.shape
        return cls((PartitionMember(0, f.n_time, 0, nlat, 0, nlon),))


@dataclass(frozen=True)
class PartitionScheme:
    """Rules for :func:`enumerate_partitions`.

    Parameters
    ----------
    min_window : int
        Minimum window length in time steps.
    box_sizes : sequence of (n_lat, n_lon), optional
        Spatial box sizes; ``None`` means the whole domain only.
    max_members : int
        Cap on the member count.
    allow_coarsening : bool
        When the cap is exceeded, double the stride of window starts, window
        ends and box offsets until the count fits; otherwise raise.
    """

    min_window: int
    box_sizes: Sequence[tuple[int, int]] | None = None
    max_members: int = 10_000
    allow_coarsening: bool = True


def _windows(n: int, min_len: int, stride: int) -> list[tuple[int, int]]:
    out = []
    for a in range(0, n - min_len + 1, stride):
        # ends sit on the stride lattice measured back from the record end
        for b in range(n, a + min_len - 1, -stride):
            out.append((a, b))
    out.sort()
    return out


def _boxes(nlat: int, nlon: int, sizes, stride: int) -> list[tuple[int, int, int, int]]:
    if sizes is None:
        return [(0, nlat, 0, nlon)]
    out = []
    for h, w in sizes:
        if not (1 <= h <= nlat and 1 <= w <= nlon):
            raise ValueError(f"box size {(h, w)} does not fit the grid {(nlat, nlon)}")
        for i in range(0, nlat - h + 1, stride):
            for j in range(0, nlon - w + 1, stride):
                out.append((i, i + h, j, j + w))
    return out


def enumerate_partitions(f: SpatioTemporalField, scheme: PartitionScheme) -> Partition:
    """All contiguous time windows of at least ``min_window`` steps crossed with spatial boxes."""
    n = f.n_time
    if scheme.min_window < 1:
        raise ValueError("min_window must be positive")
    if scheme.min_window > n:
        raise ValueError(f"min_window {scheme.min_window} exceeds record length {n}")
    nlat, nlon = f.grid.shape
    stride = 1
    while True:
        wins = _windows(n, scheme.min_window, stride)
        boxes = _boxes(nlat, nlon, scheme.box_sizes, stride)
        count = len(wins) * len(boxes)
        if count <= scheme.max_members:
            break
        if not scheme.allow_coarsening:
            raise ValueError(f"{count} partition members exceed the cap of {scheme.max_members}")
        if stride > max(n, nlat, nlon):
            raise ValueError("cannot coarsen partitions below the cap")
        stride *= 2
    members = tuple(PartitionMember(a, b, *box) for (a, b) in wins for box in boxes)
    return Partition(members, stride)


def iter_member_fields(f: SpatioTemporalField, partition: Partition) -> Iterable[tuple[PartitionMember, SpatioTemporalField]]:
    for m in partition.members:
        yield m, f.select_time(m.time_slice).select_box(m.lat_slice, m.lon_slice)
