"""
Dynamic interaction tensors.

The order-k interaction of a process is the k-th state-space gradient of
its tendency, ``D^k = grad^k_X Xdot``.  Tensors are stored compactly: one
entry per response component and per sorted driver multi-index, which makes
them symmetric in the driver indices by construction.  Dense views are
available on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .field import SpatioTemporalField
from .numdiff import (
    DerivativeStack,
    SobolevConfig,
    local_polynomial_fit,
    multiplicity,
    multisets,
    time_derivatives,
)

MAX_STACKED_DIM = 32
SPEED_FLOOR = 0.1


def reference_weights(xdot: np.ndarray) -> np.ndarray:
    """Aggregation weights proportional to inverse phase-space speed.

    Slow and recurrent parts of the trajectory dominate the aggregate.  The
    speed is floored at a tenth of its median so that a handful of nearly
    stationary samples cannot carry the whole aggregate.
    """
    speed = np.sqrt(np.sum(np.asarray(xdot, dtype=float) ** 2, axis=1))
    floor = SPEED_FLOOR * np.median(speed) + 1e-300
    w = 1.0 / np.maximum(speed, floor)
    return w / w.sum()


def offdiag_mask(k: int, n_drivers: int, diagonal_index: Sequence[int]) -> np.ndarray:
    """Boolean ``(r, n_ms)``: True for entries that count as off-diagonal.

    The diagonal entry of response ``j`` has every driver index equal to
    ``diagonal_index[j]``; a response without a matching driver (index -1)
    has no diagonal entry.
    """
    ms = multisets(n_drivers, k)
    mask = np.ones((len(diagonal_index), len(ms)), dtype=bool)
    for j, d in enumerate(diagonal_index):
        if d >= 0:
            mask[j, ms.index((d,) * k)] = False
    return mask


def multiplicities(k: int, n_drivers: int) -> np.ndarray:
    return np.array([multiplicity(m) for m in multisets(n_drivers, k)], dtype=float)


def sobolev_offdiag_norm(
    per_sample: np.ndarray,
    mask: np.ndarray,
    mult: np.ndarray,
    sample_index: np.ndarray | None = None,
    sobolev_order: int = 1,
) -> float:
    """Sobolev quadratic norm of the off-diagonal part of a tensor stream.

    The order-0 term is the sample mean of the squared Frobenius norm of
    the off-diagonal entries (each compact entry counted with its
    multiplicity).  The order-1 term adds the same for first differences
    between consecutive samples (``sample_index`` differing by one).
    """
    t = np.asarray(per_sample, dtype=float)
    if t.ndim == 2:
        t = t[None]
    wts = mask * mult[None, :]
    total = float(np.mean(np.einsum("nrm,rm->n", t**2, wts)))
    if sobolev_order >= 1 and t.shape[0] > 1:
        idx = np.arange(t.shape[0]) if sample_index is None else np.asarray(sample_index)
        cont = np.diff(idx) == 1
        if np.any(cont):
            dt = (t[1:] - t[:-1])[cont]
            total += float(np.mean(np.einsum("nrm,rm->n", dt**2, wts)))
    return total


@dataclass(frozen=True, eq=False)
class InteractionTensor:
    """Order-k interaction tensor of ``n_responses`` tendencies on ``n_drivers`` states.

    Attributes
    ----------
    order : int
    n_drivers, n_responses : int
    aggregate : ndarray, shape (r, n_ms)
        Reference-manifold aggregate, entries indexed by ``multisets(n_drivers, order)``.
    per_sample : ndarray, shape (n, r, n_ms), optional
    weights : ndarray, shape (n,), optional
        Aggregation weights.
    sample_index : ndarray, shape (n,), optional
        Position of each sample in its trajectory; consecutive samples differ by 1.
    diagonal_index : tuple of int
        Driver index paired with each response (-1 if none).
    blocks : tuple of (start, stop)
        Driver/response ranges of stacked processes.
    sobolev_order : int
    """

    order: int
    n_drivers: int
    n_responses: int
    aggregate: np.ndarray
    per_sample: np.ndarray | None = None
    weights: np.ndarray | None = None
    sample_index: np.ndarray | None = None
    diagonal_index: tuple = ()
    blocks: tuple = ()
    sobolev_order: int = 1

    @property
    def multisets(self):
        return multisets(self.n_drivers, self.order)

    @property
    def diagonal_spectrum(self) -> np.ndarray:
        """Aggregate self-interaction per response (NaN where no diagonal exists)."""
        out = np.full(self.n_responses, np.nan)
        ms = self.multisets
        for j, d in enumerate(self.diagonal_index):
            if d >= 0:
                out[j] = self.aggregate[j, ms.index((d,) * self.order)]
        return out

    @property
    def offdiag_norm(self) -> float:
        mask = offdiag_mask(self.order, self.n_drivers, self.diagonal_index)
        mult = multiplicities(self.order, self.n_drivers)
        data = self.per_sample if self.per_sample is not None else self.aggregate
        return sobolev_offdiag_norm(data, mask, mult, self.sample_index, self.sobolev_order if self.per_sample is not None else 0)

    def dense(self, per_sample: bool = False) -> np.ndarray:
        """Full symmetric tensor ``(r, d, ..., d)`` (leading sample axis if requested)."""
        src = self.per_sample if per_sample else self.aggregate[None]
        if src is None:
            raise ValueError("no per-sample tensors stored")
        d, k = self.n_drivers, self.order
        out = np.empty((src.shape[0], self.n_responses) + (d,) * k)
        lookup = {m: j for j, m in enumerate(self.multisets)}
        for idx in np.ndindex(*(d,) * k):
            out[(slice(None), slice(None)) + idx] = src[:, :, lookup[tuple(sorted(idx))]]
        return out if per_sample else out[0]

    def block(self, response_block: int, driver_block: int) -> np.ndarray:
        """Dense aggregate sub-tensor for responses of one process and drivers of another."""
        full = self.dense()
        ra, rb = self.blocks[response_block]
        da, db = self.blocks[driver_block]
        sl = (slice(ra, rb),) + (slice(da, db),) * self.order
        return full[sl]

    def dump(self, path, tol: float = 0.0) -> None:
        """Write nonzero aggregate entries as lines ``k comp i1..ik value``."""
        from .field import _atomic_write_text, _fmt

        lines = []
        for j in range(self.n_responses):
            for m, ms in enumerate(self.multisets):
                v = self.aggregate[j, m]
                if abs(v) > tol:
                    lines.append(" ".join([str(self.order), str(j)] + [str(i) for i in ms] + [_fmt(v)]))
        _atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True, eq=False)
class InteractionStack:
    tensors: tuple

    def __post_init__(self):
        orders = [t.order for t in self.tensors]
        if orders != list(range(1, len(orders) + 1)):
            raise ValueError("interaction stack orders must be contiguous from 1")

    @property
    def weights(self) -> np.ndarray:
        from math import factorial

        return np.array([1.0 / factorial(t.order) for t in self.tensors])

    def __getitem__(self, k: int) -> InteractionTensor:
        return self.tensors[k - 1]

    def __len__(self):
        return len(self.tensors)


# ---------------------------------------------------------------------------
# Sample assembly


@dataclass(frozen=True)
class StateSamples:
    """States, tendencies and trajectory positions of valid samples."""

    x: np.ndarray
    xdot: np.ndarray
    sample_index: np.ndarray
    time_index: np.ndarray
    cell_index: np.ndarray


def _is_uniform_in_space(f: SpatioTemporalField) -> bool:
    v = f.cell_series()
    return bool(np.all(v == v[:, :, :1]))


def state_samples(
    fields: Sequence[SpatioTemporalField],
    stacks: Sequence[DerivativeStack] | None = None,
    cells: Sequence[int] | None = None,
) -> StateSamples:
    """Stack the components of several fields into per-sample state vectors.

    Samples are (time, cell) pairs over ``cells``.  Fields that are
    identical in every cell contribute a single trajectory.  Only samples
    whose first time derivative is valid for every component are kept.
    """
    if not fields:
        raise ValueError("no processes given")
    t0 = fields[0].time
    for f in fields[1:]:
        if f.time != t0:
            raise ValueError("processes do not share a time axis")
        if f.grid.shape != fields[0].grid.shape:
            raise ValueError("processes do not share a grid")
    if stacks is None:
        stacks = [time_derivatives(f, SobolevConfig(beta=1)) for f in fields]
    if cells is None:
        cells = [0] if all(_is_uniform_in_space(f) for f in fields) else list(range(fields[0].n_cells))
    cells = np.asarray(cells, dtype=int)
    xs, ds, ok = [], [], np.ones((fields[0].n_time, cells.size), dtype=bool)
    for f, st in zip(fields, stacks):
        v = f.cell_series()[:, :, cells]
        d = st.time_derivs[0][:, :, cells]
        ok &= st.valid[0][:, :, cells].all(axis=0)
        xs.append(v)
        ds.append(d)
    x = np.concatenate(xs, axis=0)
    xd = np.concatenate(ds, axis=0)
    tt, cc = np.nonzero(ok.T)[1], np.nonzero(ok.T)[0]
    # order samples cell by cell, time ascending, so trajectories are contiguous
    order = np.lexsort((tt, cc))
    tt, cc = tt[order], cc[order]
    n_time = fields[0].n_time
    return StateSamples(
        x[:, tt, cc].T,
        xd[:, tt, cc].T,
        cc * (n_time + 1) + tt,
        tt,
        cells[cc],
    )


def interaction_from_samples(
    x: np.ndarray,
    xdot: np.ndarray,
    k: int,
    diagonal_index: Sequence[int] | None = None,
    sample_index: np.ndarray | None = None,
    degree: int | None = None,
    n_neighbors: int | None = None,
    fraction: float = 0.04,
    weights: np.ndarray | None = None,
    blocks: tuple = (),
    sobolev_order: int = 1,
    keep_samples: bool = True,
) -> InteractionTensor:
    """Order-k interaction from sample arrays ``x (n, d)`` and ``xdot (n, r)``."""
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if xdot.ndim == 1:
        xdot = xdot[:, None]
    n, d = x.shape
    r = xdot.shape[1]
    fit = local_polynomial_fit(x, xdot, degree or k, n_neighbors, fraction)
    per = fit.derivative_tensor(k)
    w = reference_weights(xdot) if weights is None else np.asarray(weights, dtype=float)
    # deterministic reduction: numpy's pairwise summation over a fixed layout
    agg = np.einsum("n,nrm->rm", w, per, optimize=False)
    if diagonal_index is None:
        diagonal_index = tuple(range(r)) if r == d else (-1,) * r
    return InteractionTensor(
        k,
        d,
        r,
        agg,
        per if keep_samples else None,
        w,
        np.arange(n) if sample_index is None else np.asarray(sample_index),
        tuple(diagonal_index),
        blocks,
        sobolev_order,
    )


def dynamic_interaction(
    x: SpatioTemporalField,
    derivs: DerivativeStack | None = None,
    k: int = 1,
    cells: Sequence[int] | None = None,
    **kwargs,
) -> InteractionTensor:
    """Order-k interaction of a multicomponent field with itself.

    Each component is a state variable; samples are valid (time, cell)
    pairs (a single trajectory when the field is uniform in space).
    """
    if derivs is not None and derivs.beta < 1:
        raise ValueError("derivative stack holds no first derivatives")
    s = state_samples([x], None if derivs is None else [derivs], cells)
    return interaction_from_samples(s.x, s.xdot, k, sample_index=s.sample_index, **kwargs)


def multi_process_interaction(
    processes: Sequence[SpatioTemporalField],
    k: int = 1,
    mode: str = "stacked",
    stacks: Sequence[DerivativeStack] | None = None,
    cells: Sequence[int] | None = None,
    max_dim: int = MAX_STACKED_DIM,
    **kwargs,
):
    """Interaction among several processes sharing a time axis.

    ``mode="stacked"`` regresses every tendency on the concatenated state
    and records the block layout.  ``mode="cross"`` returns a dict keyed by
    ``(response, driver)`` process pairs, each regressing one process's
    tendency on another process's state alone.
    """
    s = state_samples(processes, stacks, cells)
    sizes = [p.n_components for p in processes]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    blocks = tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))
    if edges[-1] > max_dim:
        raise ValueError(f"stacked dimension {edges[-1]} exceeds the limit {max_dim}")
    if mode == "stacked":
        return interaction_from_samples(s.x, s.xdot, k, sample_index=s.sample_index, blocks=blocks, **kwargs)
    if mode != "cross":
        raise ValueError(f"unknown mode {mode!r}")
    out = {}
    for p, (ra, rb) in enumerate(blocks):
        for q, (da, db) in enumerate(blocks):
            if p == q:
                continue
            out[(p, q)] = interaction_from_samples(
                s.x[:, da:db], s.xdot[:, ra:rb], k, diagonal_index=(-1,) * (rb - ra), sample_index=s.sample_index, **kwargs
            )
    return out


def interaction_stack(x: SpatioTemporalField, beta: int, derivs: DerivativeStack | None = None, **kwargs) -> InteractionStack:
    return InteractionStack(tuple(dynamic_interaction(x, derivs, k, **kwargs) for k in range(1, beta + 1)))


def interaction_structure(stream: np.ndarray, subspace: str, window=None, manifold=None, weights=None) -> np.ndarray:
    """Spatial or temporal structure of a tensor-valued field.

    Parameters
    ----------
    stream : ndarray, shape (n_time, n_cells, ...)
        Per-sample tensor entries over time and grid cells.
    subspace : {"space", "time"}
        ``"space"`` contracts over time (structure over a climatology),
        ``"time"`` contracts over space (structure over a region).
    window : PartitionMember, optional
        Restricts the contraction to a time range and cell box; cells are
        assumed in row-major (lat, lon) order of a grid of shape
        ``manifold.grid_shape`` or ``stream``'s cell axis when no box is
        given.
    manifold : CoevolutionManifold, optional
        Defaults to the separable manifold (plain means).
    weights : ndarray, shape (n_cells,), optional
        Area weights for the contraction over space.
    """
    from .spacetime import SubspaceBasis, retrieval_product

    a = np.asarray(stream, dtype=float)
    if window is not None:
        a = a[window.time_slice]
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError("empty window")
    n_index = a.shape[1] if subspace == "space" else a.shape[0]
    basis = SubspaceBasis.full(subspace, n_index)
    return retrieval_product(a, basis, manifold, weights=weights)
