"""Image-quality metrics and the paired one-sided Wilcoxon test."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

from .geometry import Volume

SSIM_WIN = 7


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def psnr(a, b, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE); returns inf when the volumes are identical."""
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    if data_range <= 0:
        raise ValueError(f"psnr: data_range must be > 0, got {data_range}")
    err = np.mean((x - y) ** 2)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / err)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM with uniform 7x7x7 windows (sample covariance).

    C1 = (0.01 * range)^2, C2 = (0.03 * range)^2; border voxels without a
    full window are cropped before averaging.
    """
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"ssim: volume {x.shape} smaller than window {SSIM_WIN}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    npix = SSIM_WIN ** x.ndim
    cov_norm = npix / (npix - 1)

    ux = uniform_filter(x, SSIM_WIN)
    uy = uniform_filter(y, SSIM_WIN)
    uxx = uniform_filter(x * x, SSIM_WIN)
    uyy = uniform_filter(y * y, SSIM_WIN)
    uxy = uniform_filter(x * y, SSIM_WIN)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = (SSIM_WIN - 1) // 2
    core = s[tuple(slice(pad, dim - pad) for dim in s.shape)]
    return float(core.mean())


def wilcoxon_one_sided(x, y) -> float:
    """Paired one-sided Wilcoxon signed-rank p-value for H1: x > y.

    Zero differences are dropped; at least 5 non-zero pairs are required.
    For n <= 20 the p-value is exact (full enumeration of the 2^n sign
    assignments via the rank-sum distribution); above that a normal
    approximation with continuity and tie corrections is used.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ValueError(f"wilcoxon: shape mismatch {xa.shape} vs {ya.shape}")
    d = xa - ya
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise ValueError(f"wilcoxon: need >= 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= 20:
        # Average ranks are multiples of 1/2; doubling makes them integers.
        r2 = np.rint(2 * ranks).astype(np.int64)
        total = int(r2.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        top = 0
        for r in r2:
            prev = counts[0:top + 1].copy()
            counts[r:top + r + 1] += prev
            top += r
        observed = int(np.rint(2 * w_plus))
        p = counts[observed:].sum() / 2.0 ** n
        return float(p)

    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = np.sum(tie_counts ** 3 - tie_counts) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_plus - mu - 0.5) / sigma
    return 0.5 * math.erfc(z / math.sqrt(2.0))
