"""Classical reconstructions: FDK filtered backprojection and SIRT.

FDK stages: per-pixel cosine weighting sdd/sqrt(sdd^2 + u^2 + v^2),
row-wise ramp filtering by zero-padded FFT convolution (pad length =
2 * next power of two of the column count), then distance-weighted
cone-beam backprojection with per-view weight pi / n_views. That weight
folds the 1/2 of the full-scan formula together with the 360/arc
short-scan normalisation; no Parker weighting is applied.

The ramp filter uses the band-limited discrete impulse response
h(0) = 1/(4 d^2), h(n) = -1/(pi n d)^2 for odd n sampled at the virtual
detector pitch d = det_pitch * sod / sdd; a Hann window on the frequency
response is available for noisy data.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .geometry import GeometryError, ProjectionSet, Volume, VolumeGrid
from .projector import back_project, forward_project

FDK_FILTERS = ("ram_lak", "hann_windowed_ram_lak")


def _ramp_response(n_pad: int, d: float, filter_kind: str) -> np.ndarray:
    h = np.zeros(n_pad)
    h[0] = 1.0 / (4.0 * d * d)
    k = np.arange(1, n_pad // 2 + 1)
    odd = k[k % 2 == 1]
    vals = -1.0 / (np.pi * odd * d) ** 2
    h[odd] = vals
    h[-odd] = vals  # circular wrap for negative taps
    resp = np.fft.rfft(h)
    if filter_kind == "hann_windowed_ram_lak":
        f = np.fft.rfftfreq(n_pad, d)
        nyq = 1.0 / (2.0 * d)
        resp = resp * 0.5 * (1.0 + np.cos(np.pi * f / nyq))
    return resp


def fdk_reconstruct(p: ProjectionSet, grid: VolumeGrid,
                    filter_kind: str = "ram_lak") -> Volume:
    """Feldkamp-Davis-Kress reconstruction onto the given grid."""
    if filter_kind not in FDK_FILTERS:
        raise ValueError(f"unknown filter {filter_kind!r}, expected one of {FDK_FILTERS}")
    g = p.geometry
    if g.n_views < 2:
        raise GeometryError(f"FDK needs at least 2 views, got {g.n_views}")

    u = (np.arange(g.det_cols) - (g.det_cols - 1) / 2.0) * g.det_pitch
    v = (np.arange(g.det_rows) - (g.det_rows - 1) / 2.0) * g.det_pitch
    cosw = g.sdd / np.sqrt(g.sdd ** 2 + u[None, :] ** 2 + v[:, None] ** 2)
    weighted = p.data * cosw[None, :, :].astype(np.float32)

    d_iso = g.det_pitch * g.sod / g.sdd
    n_pad = 2 * (1 << int(np.ceil(np.log2(g.det_cols))))
    resp = _ramp_response(n_pad, d_iso, filter_kind)
    spec = np.fft.rfft(weighted, n=n_pad, axis=-1)
    filt = np.fft.irfft(spec * resp, n=n_pad, axis=-1)[..., :g.det_cols]
    filt = (filt * d_iso).astype(np.float32)

    bp = kernels.fdk_backproject(
        filt, grid.shape, grid.voxel_size, grid.origin, g.view_angles,
        g.sod, g.sdd, g.det_pitch,
    )
    out = bp * np.float32(np.pi / g.n_views)
    return Volume(grid, np.nan_to_num(out, copy=False))


def sirt_reconstruct(p: ProjectionSet, grid: VolumeGrid, n_iters: int,
                     return_residuals: bool = False):
    """Simultaneous iterative reconstruction technique.

    x_{k+1} = clip(x_k + C A^T R (y - A x_k), 0), starting from x_0 = 0,
    with R the reciprocal ray intersection lengths (row sums) and C the
    reciprocal voxel sensitivities (column sums); reciprocals of entries
    below 1e-8 are set to zero.

    With return_residuals=True also returns a dict with per-iteration
    projection-domain residual norms, entries k = 0..n_iters: "l2" is
    ||A x_k - y||_2 and "weighted" the R-weighted norm.
    """
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    g = p.geometry
    eps = 1e-8

    ones_vol = Volume(grid, np.ones(grid.shape, dtype=np.float32))
    row = forward_project(ones_vol, g).data
    rw = np.where(row > eps, 1.0 / np.where(row > eps, row, 1.0), 0.0).astype(np.float32)
    ones_proj = ProjectionSet(g, np.ones_like(p.data))
    col = back_project(ones_proj, grid).data
    cw = np.where(col > eps, 1.0 / np.where(col > eps, col, 1.0), 0.0).astype(np.float32)

    y = p.data
    x = np.zeros(grid.shape, dtype=np.float32)
    res_l2 = np.empty(n_iters + 1)
    res_w = np.empty(n_iters + 1)
    for k in range(n_iters):
        r = y - forward_project(Volume(grid, x), g).data
        res_l2[k] = np.linalg.norm(r.ravel())
        res_w[k] = np.sqrt(np.sum(rw.astype(np.float64) * r.astype(np.float64) ** 2))
        upd = back_project(ProjectionSet(g, rw * r), grid).data
        x = np.clip(x + cw * upd, 0.0, None)
    r = y - forward_project(Volume(grid, x), g).data
    res_l2[n_iters] = np.linalg.norm(r.ravel())
    res_w[n_iters] = np.sqrt(np.sum(rw.astype(np.float64) * r.astype(np.float64) ** 2))

    vol = Volume(grid, x)
    if return_residuals:
        return vol, {"l2": res_l2, "weighted": res_w}
    return vol
