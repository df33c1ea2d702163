"""
Information-theoretic diagnostics through Gaussian anamorphosis.

Every variable is mapped to a standard normal by its ranks.  Dependence is
then measured with Gaussian-copula formulas, and marginal entropies carry a
Jacobian correction estimated from sample spacings.  Significance comes
from shuffle nulls whose replicate seeds are split deterministically from
one base seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import digamma, ndtri
from scipy.stats import rankdata

MI_CAP = 20.0
HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True)
class InfoResult:
    """Estimate in nats with its shuffle-null summary.

    ``value`` is the reported estimate (clipped or capped where the
    estimator demands it); ``raw_value`` keeps the unclipped number.
    """

    value: float
    raw_value: float
    mc_null_mean: float = np.nan
    mc_null_q95: float = np.nan
    mc_null_sd: float = np.nan
    n_shuffles: int = 0
    capped: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def significant(self) -> bool:
        return bool(self.n_shuffles > 0 and self.value > self.mc_null_q95)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("sample matrix must be 2-D (samples, variables)")
    if x.shape[0] < 8:
        raise ValueError("at least 8 samples are required")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample matrix has missing or non-finite values")
    return x


def seeds_for(seed, n: int) -> list[np.random.Generator]:
    """Independent generators, one per replicate, split from ``seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def anamorphosis(x) -> np.ndarray:
    """Map every column to standard normal scores through its ranks.

    Ties receive their average rank; rank ``r`` maps to the normal quantile
    at ``(r - 0.5) / n``.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    const = np.all(x == x[0], axis=0)
    if np.any(const):
        raise ValueError(f"constant column(s) {np.flatnonzero(const).tolist()} cannot be anamorphosed")
    r = rankdata(x, method="average", axis=0)
    return ndtri((r - 0.5) / n)


def _logdet(c: np.ndarray) -> float:
    if c.size == 0:
        return 0.0
    sign, ld = np.linalg.slogdet(c)
    return ld if sign > 0 else -np.inf


def _corr(z: np.ndarray) -> np.ndarray:
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc
    d = np.sqrt(np.diag(cov))
    return cov / d[:, None] / d[None, :]


def gaussian_mi(R: np.ndarray, a: Sequence[int], b: Sequence[int], cap: float = MI_CAP) -> tuple[float, bool]:
    """Gaussian mutual information between index groups of a correlation matrix.

    Returns ``(value, capped)``; singular joints give the cap.
    """
    a, b = list(a), list(b)
    ab = a + b
    # a singular joint gives inf - inf; that case is capped below
    with np.errstate(invalid="ignore"):
        val = 0.5 * (_logdet(R[np.ix_(a, a)]) + _logdet(R[np.ix_(b, b)]) - _logdet(R[np.ix_(ab, ab)]))
    if not np.isfinite(val) or val > cap:
        return cap, True
    return max(val, 0.0), False


def gaussian_cmi(R: np.ndarray, a, b, c, cap: float = MI_CAP) -> tuple[float, bool]:
    """Gaussian conditional mutual information ``I(a; b | c)``."""
    a, b, c = list(a), list(b), list(c)
    with np.errstate(invalid="ignore"):
        val = 0.5 * (
            _logdet(R[np.ix_(a + c, a + c)])
            + _logdet(R[np.ix_(b + c, b + c)])
            - _logdet(R[np.ix_(c, c)])
            - _logdet(R[np.ix_(a + b + c, a + b + c)])
        )
    if not np.isfinite(val) or val > cap:
        return cap, True
    return max(val, 0.0), False


def copula_mi(a, b, cap: float = MI_CAP) -> float:
    """Gaussian-copula mutual information between two sample matrices (no null)."""
    za = anamorphosis(a)
    zb = anamorphosis(b)
    R = _corr(np.hstack([za, zb]))
    return gaussian_mi(R, range(za.shape[1]), range(za.shape[1], za.shape[1] + zb.shape[1]), cap)[0]


def _null_summary(values: np.ndarray) -> tuple[float, float, float]:
    return float(np.mean(values)), float(np.quantile(values, 0.95)), float(np.std(values, ddof=1))


def mutual_information(x, group_a: Sequence[int], group_b: Sequence[int], shuffles: int = 1000, seed=0, cap: float = MI_CAP) -> InfoResult:
    """Mutual information between two disjoint column groups of ``x``.

    The null distribution shuffles the rows of group B.
    """
    x = _as_matrix(x)
    a, b = list(group_a), list(group_b)
    if set(a) & set(b):
        raise ValueError("column groups must be disjoint")
    z = anamorphosis(x[:, a + b])
    ia, ib = list(range(len(a))), list(range(len(a), len(a) + len(b)))
    R = _corr(z)
    value, capped = gaussian_mi(R, ia, ib, cap)
    raw = 0.5 * (_logdet(R[np.ix_(ia, ia)]) + _logdet(R[np.ix_(ib, ib)]) - _logdet(R))
    if shuffles <= 0:
        return InfoResult(value, float(raw), capped=capped)
    null = np.empty(shuffles)
    for j, rng in enumerate(seeds_for(seed, shuffles)):
        zs = z.copy()
        zs[:, ib] = z[rng.permutation(z.shape[0])][:, ib]
        null[j] = gaussian_mi(_corr(zs), ia, ib, cap)[0]
    mean, q95, sd = _null_summary(null)
    return InfoResult(value, float(raw), mean, q95, sd, shuffles, capped)


def marginal_entropy(x, spacing: int | None = None) -> np.ndarray:
    """Differential entropy of each column via the anamorphosis Jacobian.

    With ``z`` the normal scores, ``H(x) = H(z) + E[ln dx/dz]``.  The
    derivative is the ratio of ``m``-spacings of the sorted sample to those
    of the normal quantiles, with ``m = round(sqrt(n) / 2)``, corrected for
    the mean log-spacing bias of uniform order statistics.
    """
    x = _as_matrix(x)
    n = x.shape[0]
    m = spacing or max(1, int(round(np.sqrt(n) / 2)))
    q = ndtri((np.arange(1, n + 1) - 0.5) / n)
    i = np.arange(n)
    lo = np.clip(i - m, 0, n - 1)
    hi = np.clip(i + m, 0, n - 1)
    # a k-spacing of n uniform order statistics is Beta(k, n + 1 - k), so
    # E[ln spacing] = psi(k) - psi(n + 1); remove its offset from ln(k / n)
    k = (hi - lo).astype(float)
    bias = digamma(k) - digamma(n + 1.0) - np.log(k / n)
    out = np.empty(x.shape[1])
    for c in range(x.shape[1]):
        s = np.sort(x[:, c])
        ds = s[hi] - s[lo]
        dz = q[hi] - q[lo]
        ok = ds > 0
        if not np.any(ok):
            raise ValueError(f"column {c} is constant")
        out[c] = HALF_LOG_2PIE + np.mean(np.log(ds[ok] / dz[ok]) - bias[ok])
    return out


def _negentropy_parts(x: np.ndarray):
    var = np.var(x, axis=0)
    if np.any(var <= 0):
        raise ValueError("degenerate covariance: zero-variance column")
    h_gauss = np.sum(0.5 * np.log(2.0 * np.pi * np.e * var))
    h_marg = marginal_entropy(x)
    return h_gauss, h_marg


def negentropy(x, shuffles: int = 1000, seed=0, cap: float = MI_CAP) -> InfoResult:
    """Negentropy ``J = H(S_N) - H(S)``.

    ``H(S_N)`` is the Gaussian entropy at the sample variances (diagonal
    covariance).  ``H(S)`` is the sum of marginal entropies minus the
    Gaussian-copula multi-information of the normal scores, so ``J`` counts
    both marginal non-normality and dependence between columns.  ``value``
    is clipped at zero.  The null shuffles each column independently; a
    single column has no dependence to destroy, so its null is the
    estimate on Gaussian samples of the same length instead.
    """
    x = _as_matrix(x)
    z = anamorphosis(x)
    h_gauss, h_marg = _negentropy_parts(x)
    d = x.shape[1]
    capped = False
    multi = 0.0
    if d > 1:
        ld = _logdet(_corr(z))
        multi = -0.5 * ld
        if not np.isfinite(multi) or multi > cap:
            multi, capped = cap, True
    raw = float(h_gauss - (np.sum(h_marg) - multi))
    value = max(raw, 0.0)
    if shuffles <= 0:
        return InfoResult(value, raw, capped=capped)
    marg_part = h_gauss - np.sum(h_marg)
    null = np.empty(shuffles)
    for j, rng in enumerate(seeds_for(seed, shuffles)):
        if d == 1:
            g = rng.standard_normal((x.shape[0], 1))
            hg, hm = _negentropy_parts(g)
            null[j] = max(float(hg - hm[0]), 0.0)
            continue
        zs = np.column_stack([z[rng.permutation(z.shape[0]), c] for c in range(d)])
        m = -0.5 * _logdet(_corr(zs))
        null[j] = max(marg_part + min(m, cap), 0.0)
    mean, q95, sd = _null_summary(null)
    return InfoResult(value, raw, mean, q95, sd, shuffles, capped)


def _interaction_from_corr(R, a, b, y, cap):
    iaby, c1 = gaussian_mi(R, a + b, y, cap)
    iay, c2 = gaussian_mi(R, a, y, cap)
    iby, c3 = gaussian_mi(R, b, y, cap)
    icond, c4 = gaussian_cmi(R, a, b, y, cap)
    iab, c5 = gaussian_mi(R, a, b, cap)
    return iaby - iay - iby, icond - iab, any((c1, c2, c3, c4, c5))


def interaction_information(
    xa, xb, y, shuffles: int = 1000, seed=0, cap: float = MI_CAP, n_boot: int = 200
) -> InfoResult:
    """Interaction information ``I[(A,B),Y] - I(A,Y) - I(B,Y)``.

    The conditional form ``I(A,B|Y) - I(A,B)`` is computed as a cross-check
    and stored in ``extra`` together with a bootstrap standard error.
    Positive values mean synergy, negative values redundancy.  The null
    shuffles the rows of ``y``.
    """
    xa, xb, y = _as_matrix(xa), _as_matrix(xb), _as_matrix(y)
    if not (xa.shape[0] == xb.shape[0] == y.shape[0]):
        raise ValueError("groups have different sample counts")
    z = anamorphosis(np.hstack([xa, xb, y]))
    na, nb = xa.shape[1], xb.shape[1]
    a = list(range(na))
    b = list(range(na, na + nb))
    yy = list(range(na + nb, z.shape[1]))
    R = _corr(z)
    it, it_cond, capped = _interaction_from_corr(R, a, b, yy, cap)
    n = z.shape[0]
    boot = np.empty((n_boot, 2))
    for j, rng in enumerate(seeds_for([seed, 1], n_boot)):
        idx = rng.integers(0, n, n)
        boot[j] = _interaction_from_corr(_corr(z[idx]), a, b, yy, cap)[:2]
    se = float(np.std(boot[:, 0], ddof=1)) if n_boot > 1 else np.nan
    extra = {
        "conditional_form": it_cond,
        "standard_error": se,
        "forms_agree": bool(abs(it - it_cond) <= 2.0 * se) if n_boot > 1 else None,
    }
    if shuffles <= 0:
        return InfoResult(it, it, capped=capped, extra=extra)
    null = np.empty(shuffles)
    for j, rng in enumerate(seeds_for([seed, 0], shuffles)):
        zs = z.copy()
        zs[:, yy] = z[rng.permutation(n)][:, yy]
        null[j] = _interaction_from_corr(_corr(zs), a, b, yy, cap)[0]
    mean, q95, sd = _null_summary(null)
    return InfoResult(it, it, mean, q95, sd, shuffles, capped, extra)
