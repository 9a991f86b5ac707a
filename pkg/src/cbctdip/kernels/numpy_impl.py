"""Pure-numpy kernel implementations (fallback backend).

Convolutions go through im2col views + BLAS matmuls; the projector is
vectorised per view. Signatures are shared with numba_impl — wrappers in
kernels/__init__.py pre-pad convolution inputs, so every conv here is a
"valid" correlation.

Array layouts: 3D feature maps (C, D, H, W), 2D maps (C, H, W), volumes
(nx, ny, nz), projections (n_views, det_rows, det_cols), all float32.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col3(xp: np.ndarray, kd: int, kh: int, kw: int) -> np.ndarray:
    # (Cin, Do, Ho, Wo, kd, kh, kw) -> (Do*Ho*Wo, Cin*kd*kh*kw)
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    cin, do, ho, wo = win.shape[:4]
    col = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(do * ho * wo, cin * kd * kh * kw)
    return np.ascontiguousarray(col)


def conv3d_forward(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    cout, cin, kd, kh, kw = w.shape
    col = _im2col3(xp, kd, kh, kw)
    do, ho, wo = (xp.shape[1] - kd + 1, xp.shape[2] - kh + 1, xp.shape[3] - kw + 1)
    y = w.reshape(cout, -1) @ col.T
    return np.ascontiguousarray(y.reshape(cout, do, ho, wo))


def conv3d_grad_w(xp: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cout, do, ho, wo = dy.shape
    cin = xp.shape[0]
    kd = xp.shape[1] - do + 1
    kh = xp.shape[2] - ho + 1
    kw = xp.shape[3] - wo + 1
    col = _im2col3(xp, kd, kh, kw)
    dw = dy.reshape(cout, -1) @ col
    return np.ascontiguousarray(dw.reshape(cout, cin, kd, kh, kw))


def _im2col2(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cin, ho, wo = win.shape[:3]
    col = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    return np.ascontiguousarray(col)


def conv2d_forward(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    cout, cin, kh, kw = w.shape
    col = _im2col2(xp, kh, kw)
    ho, wo = (xp.shape[1] - kh + 1, xp.shape[2] - kw + 1)
    y = w.reshape(cout, -1) @ col.T
    return np.ascontiguousarray(y.reshape(cout, ho, wo))


def conv2d_grad_w(xp: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cout, ho, wo = dy.shape
    cin = xp.shape[0]
    kh = xp.shape[1] - ho + 1
    kw = xp.shape[2] - wo + 1
    col = _im2col2(xp, kh, kw)
    dw = dy.reshape(cout, -1) @ col
    return np.ascontiguousarray(dw.reshape(cout, cin, kh, kw))


# Transposed 3D convolution, kernel 2, stride 2: output voxel (2d+a, 2h+b,
# 2w+c) receives exactly one input voxel, so the op factors into one matmul
# plus an interleaving reshape.

def tconv3d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cin, d, h, wd = x.shape
    cout = w.shape[1]
    t = w.reshape(cin, cout * 8).T @ x.reshape(cin, -1)  # (cout*8, P)
    t = t.reshape(cout, 2, 2, 2, d, h, wd).transpose(0, 4, 1, 5, 2, 6, 3)
    return np.ascontiguousarray(t.reshape(cout, 2 * d, 2 * h, 2 * wd))


def _tconv3d_fold(dy: np.ndarray) -> np.ndarray:
    # (cout, 2D, 2H, 2W) -> (cout*8, D*H*W) matching w.reshape(cin, cout*8)
    cout, d2, h2, w2 = dy.shape
    d, h, wd = d2 // 2, h2 // 2, w2 // 2
    t = dy.reshape(cout, d, 2, h, 2, wd, 2).transpose(0, 2, 4, 6, 1, 3, 5)
    return np.ascontiguousarray(t.reshape(cout * 8, d * h * wd))


def tconv3d_grad_x(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    cin, cout = w.shape[:2]
    dyr = _tconv3d_fold(dy)
    dx = w.reshape(cin, cout * 8) @ dyr
    d, h, wd = dy.shape[1] // 2, dy.shape[2] // 2, dy.shape[3] // 2
    return np.ascontiguousarray(dx.reshape(cin, d, h, wd))


def tconv3d_grad_w(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    cin = x.shape[0]
    cout = dy.shape[0]
    dyr = _tconv3d_fold(dy)
    dw = x.reshape(cin, -1) @ dyr.T
    return np.ascontiguousarray(dw.reshape(cin, cout, 2, 2, 2))


# ---------------------------------------------------------------------------
# cone-beam projector
# ---------------------------------------------------------------------------

def _ray_grid(nr, nc, pitch, ang, sod, sdd):
    """Source position, unit ray directions per detector pixel (flattened)."""
    cb, sb = np.cos(ang), np.sin(ang)
    src = np.array([sod * cb, sod * sb, 0.0])
    det_c = np.array([(sod - sdd) * cb, (sod - sdd) * sb, 0.0])
    eu = np.array([-sb, cb, 0.0])
    ev = np.array([0.0, 0.0, 1.0])
    u = (np.arange(nc) - (nc - 1) / 2.0) * pitch
    v = (np.arange(nr) - (nr - 1) / 2.0) * pitch
    pix = det_c + u[None, :, None] * eu + v[:, None, None] * ev  # (nr, nc, 3)
    d = pix.reshape(-1, 3) - src
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return src, d


def _aabb_clip(src, dirs, lo, hi):
    """Entry/exit parameters of rays against the volume box (t1<=t0: miss)."""
    t0 = np.zeros(len(dirs))
    t1 = np.full(len(dirs), np.inf)
    for ax in range(3):
        d = dirs[:, ax]
        o = src[ax]
        par = np.abs(d) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[ax] - o) / d
            tb = (hi[ax] - o) / d
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        inside = (o >= lo[ax]) & (o <= hi[ax])
        t0 = np.where(par, np.where(inside, t0, np.inf), np.maximum(t0, near))
        t1 = np.where(par, np.where(inside, t1, -np.inf), np.minimum(t1, far))
    return t0, t1


def _trilinear_gather(vol, fx, fy, fz, valid):
    nx, ny, nz = vol.shape
    ix = np.floor(fx).astype(np.int64)
    iy = np.floor(fy).astype(np.int64)
    iz = np.floor(fz).astype(np.int64)
    dx, dy, dz = fx - ix, fy - iy, fz - iz
    out = np.zeros(fx.shape, dtype=np.float64)
    for cx in (0, 1):
        wx = dx if cx else 1.0 - dx
        gx = ix + cx
        okx = (gx >= 0) & (gx < nx)
        for cy in (0, 1):
            wy = dy if cy else 1.0 - dy
            gy = iy + cy
            oky = okx & (gy >= 0) & (gy < ny)
            for cz in (0, 1):
                wz = dz if cz else 1.0 - dz
                gz = iz + cz
                ok = oky & (gz >= 0) & (gz < nz) & valid
                if not ok.any():
                    continue
                vals = vol[gx[ok], gy[ok], gz[ok]]
                out[ok] += (wx * wy * wz)[ok] * vals
    return out


def _sample_coords(vol_shape, vs, ox, oy, oz, src, dirs, step):
    nx, ny, nz = vol_shape
    lo = (ox - nx * vs / 2.0, oy - ny * vs / 2.0, oz - nz * vs / 2.0)
    hi = (ox + nx * vs / 2.0, oy + ny * vs / 2.0, oz + nz * vs / 2.0)
    t0, t1 = _aabb_clip(src, dirs, lo, hi)
    span = np.maximum(t1 - t0, 0.0)
    nsteps = np.floor(span / step).astype(np.int64)
    nmax = int(nsteps.max()) if len(nsteps) else 0
    if nmax == 0:
        return None
    t = t0[:, None] + (np.arange(nmax)[None, :] + 0.5) * step
    valid = np.arange(nmax)[None, :] < nsteps[:, None]
    pts = src[None, None, :] + t[:, :, None] * dirs[:, None, :]
    fx = (pts[:, :, 0] - ox) / vs + (nx - 1) / 2.0
    fy = (pts[:, :, 1] - oy) / vs + (ny - 1) / 2.0
    fz = (pts[:, :, 2] - oz) / vs + (nz - 1) / 2.0
    return fx, fy, fz, valid


def project_forward(vol, vs, ox, oy, oz, angles, sod, sdd, pitch, nr, nc, step):
    proj = np.zeros((len(angles), nr, nc), dtype=np.float32)
    for m, ang in enumerate(angles):
        src, dirs = _ray_grid(nr, nc, pitch, ang, sod, sdd)
        coords = _sample_coords(vol.shape, vs, ox, oy, oz, src, dirs, step)
        if coords is None:
            continue
        fx, fy, fz, valid = coords
        vals = _trilinear_gather(vol, fx, fy, fz, valid)
        proj[m] = (vals.sum(axis=1) * step).reshape(nr, nc).astype(np.float32)
    return proj


def project_adjoint(proj, nx, ny, nz, vs, ox, oy, oz, angles, sod, sdd, pitch, step):
    nr, nc = proj.shape[1], proj.shape[2]
    vol = np.zeros(nx * ny * nz, dtype=np.float64)
    for m, ang in enumerate(angles):
        src, dirs = _ray_grid(nr, nc, pitch, ang, sod, sdd)
        coords = _sample_coords((nx, ny, nz), vs, ox, oy, oz, src, dirs, step)
        if coords is None:
            continue
        fx, fy, fz, valid = coords
        g = proj[m].reshape(-1, 1).astype(np.float64) * step  # per-sample deposit
        ix = np.floor(fx).astype(np.int64)
        iy = np.floor(fy).astype(np.int64)
        iz = np.floor(fz).astype(np.int64)
        dx, dy, dz = fx - ix, fy - iy, fz - iz
        for cx in (0, 1):
            wx = dx if cx else 1.0 - dx
            gx = ix + cx
            okx = (gx >= 0) & (gx < nx)
            for cy in (0, 1):
                wy = dy if cy else 1.0 - dy
                gy = iy + cy
                oky = okx & (gy >= 0) & (gy < ny)
                for cz in (0, 1):
                    wz = dz if cz else 1.0 - dz
                    gz = iz + cz
                    ok = oky & (gz >= 0) & (gz < nz) & valid
                    if not ok.any():
                        continue
                    flat = (gx[ok] * ny + gy[ok]) * nz + gz[ok]
                    dep = (wx * wy * wz * g)[ok]
                    np.add.at(vol, flat, dep)
    return vol.reshape(nx, ny, nz).astype(np.float32)


def fdk_backproject(filt, nx, ny, nz, vs, ox, oy, oz, angles, sod, sdd, pitch):
    """Distance-weighted cone-beam backprojection of filtered projections.

    Detector coordinates are rescaled to the virtual detector through the
    rotation axis (u_iso = u_det * sod/sdd); the accumulated weight per view
    is (sod / t)^2 with t the source-to-voxel distance along the central ray.
    The angular normalisation is applied by the caller.
    """
    nr, nc = filt.shape[1], filt.shape[2]
    pitch_iso = pitch * sod / sdd
    xs = (np.arange(nx) - (nx - 1) / 2.0) * vs + ox
    ys = (np.arange(ny) - (ny - 1) / 2.0) * vs + oy
    zs = (np.arange(nz) - (nz - 1) / 2.0) * vs + oz
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    gx, gy, gz = gx.ravel(), gy.ravel(), gz.ravel()
    acc = np.zeros(gx.shape, dtype=np.float64)
    for m, ang in enumerate(angles):
        cb, sb = np.cos(ang), np.sin(ang)
        t = sod - gx * cb - gy * sb
        ok = t > 1e-6
        ts = np.where(ok, t, 1.0)
        uiso = (-gx * sb + gy * cb) * sod / ts
        viso = gz * sod / ts
        fu = uiso / pitch_iso + (nc - 1) / 2.0
        fv = viso / pitch_iso + (nr - 1) / 2.0
        iu = np.floor(fu).astype(np.int64)
        iv = np.floor(fv).astype(np.int64)
        du, dv = fu - iu, fv - iv
        img = filt[m]
        val = np.zeros(gx.shape, dtype=np.float64)
        for cu in (0, 1):
            wu = du if cu else 1.0 - du
            gu = iu + cu
            oku = (gu >= 0) & (gu < nc)
            for cv in (0, 1):
                wv = dv if cv else 1.0 - dv
                gvv = iv + cv
                okv = oku & (gvv >= 0) & (gvv < nr) & ok
                if not okv.any():
                    continue
                val[okv] += (wu * wv)[okv] * img[gvv[okv], gu[okv]]
        acc += np.where(ok, (sod / ts) ** 2 * val, 0.0)
    return acc.reshape(nx, ny, nz).astype(np.float32)
