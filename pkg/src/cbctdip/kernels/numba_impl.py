"""Numba @njit kernel implementations (default backend).

Same contracts and layouts as numpy_impl. Backprojection never scatters
into shared memory from concurrent rays: each thread owns a private
volume accumulator and the partial volumes are reduced in a fixed order,
so results are bit-identical at a fixed thread count and agree across
thread counts to float32 round-off.
"""

from __future__ import annotations

import math

import numpy as np
from numba import get_num_threads, get_thread_id, njit, prange

_F32 = np.float32


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

# Wide-channel convolutions run as an explicit transposed im2col panel
# plus a BLAS matmul via np.dot; shapes with few input features (or panels
# too large to materialise) keep the direct loops.
_COL_MIN_FEATS = 128
_COL_MAX_PANEL = 64_000_000  # floats; caps the im2col allocation


@njit(parallel=True, fastmath=True, cache=True)
def _im2colT3(xp, kd, kh, kw, do, ho, wo):
    cin = xp.shape[0]
    colt = np.empty((cin * kd * kh * kw, do * ho * wo), dtype=_F32)
    kvol = kd * kh * kw
    for t in prange(cin * kvol):
        ci = t // kvol
        r = t % kvol
        a = r // (kh * kw)
        b = (r % (kh * kw)) // kw
        c = r % kw
        for od in range(do):
            for oh in range(ho):
                xrow = xp[ci, od + a, oh + b]
                base = (od * ho + oh) * wo
                for ow in range(wo):
                    colt[t, base + ow] = xrow[ow + c]
    return colt


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_forward(xp, w):
    cout, cin, kd, kh, kw = w.shape
    do = xp.shape[1] - kd + 1
    ho = xp.shape[2] - kh + 1
    wo = xp.shape[3] - kw + 1
    nfeat = cin * kd * kh * kw
    if _COL_MIN_FEATS <= nfeat and nfeat * do * ho * wo <= _COL_MAX_PANEL:
        colt = _im2colT3(xp, kd, kh, kw, do, ho, wo)
        flat = np.dot(w.reshape(cout, nfeat), colt)
        return flat.reshape(cout, do, ho, wo)
    y = np.zeros((cout, do, ho, wo), dtype=_F32)
    for idx in prange(cout * do):
        co = idx // do
        od = idx % do
        buf = np.zeros(wo, dtype=_F32)
        for oh in range(ho):
            buf[:] = 0.0
            for ci in range(cin):
                for a in range(kd):
                    for b in range(kh):
                        row = xp[ci, od + a, oh + b]
                        for c in range(kw):
                            wv = w[co, ci, a, b, c]
                            for i in range(wo):
                                buf[i] += wv * row[c + i]
            y[co, od, oh, :] = buf
    return y


@njit(parallel=True, fastmath=True, cache=True)
def conv3d_grad_w(xp, dy):
    cout, do, ho, wo = dy.shape
    cin = xp.shape[0]
    kd = xp.shape[1] - do + 1
    kh = xp.shape[2] - ho + 1
    kw = xp.shape[3] - wo + 1
    nfeat = cin * kd * kh * kw
    if _COL_MIN_FEATS <= nfeat and nfeat * do * ho * wo <= _COL_MAX_PANEL:
        colt = _im2colT3(xp, kd, kh, kw, do, ho, wo)
        dy2t = np.ascontiguousarray(dy.reshape(cout, do * ho * wo).T)
        dwt = np.dot(colt, dy2t)            # (nfeat, cout)
        dw = np.empty((cout, nfeat), dtype=_F32)
        for co in prange(cout):
            for t in range(nfeat):
                dw[co, t] = dwt[t, co]
        return dw.reshape(cout, cin, kd, kh, kw)
    dw = np.zeros((cout, cin, kd, kh, kw), dtype=_F32)
    for co in prange(cout):
        for ci in range(cin):
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        s = 0.0
                        for od in range(do):
                            for oh in range(ho):
                                xrow = xp[ci, od + a, oh + b]
                                drow = dy[co, od, oh]
                                for i in range(wo):
                                    s += xrow[c + i] * drow[i]
                        dw[co, ci, a, b, c] = s
    return dw


@njit(parallel=True, fastmath=True, cache=True)
def _im2colT2(xp, kh, kw, ho, wo):
    # transposed panel (cin*kh*kw, ho*wo): matmuls below need no copies
    cin = xp.shape[0]
    colt = np.empty((cin * kh * kw, ho * wo), dtype=_F32)
    for t in prange(cin * kh * kw):
        ci = t // (kh * kw)
        r = t % (kh * kw)
        b = r // kw
        c = r % kw
        for oh in range(ho):
            xrow = xp[ci, oh + b]
            base = oh * wo
            for ow in range(wo):
                colt[t, base + ow] = xrow[ow + c]
    return colt


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_forward(xp, w):
    cout, cin, kh, kw = w.shape
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    if cin * kh * kw >= _COL_MIN_FEATS:
        colt = _im2colT2(xp, kh, kw, ho, wo)
        flat = np.dot(w.reshape(cout, cin * kh * kw), colt)
        return flat.reshape(cout, ho, wo)
    y = np.zeros((cout, ho, wo), dtype=_F32)
    for idx in prange(cout * ho):
        co = idx // ho
        oh = idx % ho
        buf = np.zeros(wo, dtype=_F32)
        for ci in range(cin):
            for b in range(kh):
                row = xp[ci, oh + b]
                for c in range(kw):
                    wv = w[co, ci, b, c]
                    for i in range(wo):
                        buf[i] += wv * row[c + i]
        y[co, oh, :] = buf
    return y


@njit(parallel=True, fastmath=True, cache=True)
def conv2d_grad_w(xp, dy):
    cout, ho, wo = dy.shape
    cin = xp.shape[0]
    kh = xp.shape[1] - ho + 1
    kw = xp.shape[2] - wo + 1
    if cin * kh * kw >= _COL_MIN_FEATS:
        colt = _im2colT2(xp, kh, kw, ho, wo)
        dy2t = np.ascontiguousarray(dy.reshape(cout, ho * wo).T)
        dwt = np.dot(colt, dy2t)            # (cin*kh*kw, cout)
        dw = np.empty((cout, cin * kh * kw), dtype=_F32)
        for co in prange(cout):
            for t in range(cin * kh * kw):
                dw[co, t] = dwt[t, co]
        return dw.reshape(cout, cin, kh, kw)
    dw = np.zeros((cout, cin, kh, kw), dtype=_F32)
    for co in prange(cout):
        for ci in range(cin):
            for b in range(kh):
                for c in range(kw):
                    s = 0.0
                    for oh in range(ho):
                        xrow = xp[ci, oh + b]
                        drow = dy[co, oh]
                        for i in range(wo):
                            s += xrow[c + i] * drow[i]
                    dw[co, ci, b, c] = s
    return dw


@njit(parallel=True, fastmath=True, cache=True)
def tconv3d_forward(x, w):
    cin, d, h, wd = x.shape
    cout = w.shape[1]
    y = np.zeros((cout, 2 * d, 2 * h, 2 * wd), dtype=_F32)
    for co in prange(cout):
        for dd in range(d):
            for hh in range(h):
                for a in range(2):
                    for b in range(2):
                        orow = y[co, 2 * dd + a, 2 * hh + b]
                        for ci in range(cin):
                            xrow = x[ci, dd, hh]
                            w0 = w[ci, co, a, b, 0]
                            w1 = w[ci, co, a, b, 1]
                            for i in range(wd):
                                v = xrow[i]
                                orow[2 * i] += w0 * v
                                orow[2 * i + 1] += w1 * v
    return y


@njit(parallel=True, fastmath=True, cache=True)
def tconv3d_grad_x(dy, w):
    cin, cout = w.shape[0], w.shape[1]
    d = dy.shape[1] // 2
    h = dy.shape[2] // 2
    wd = dy.shape[3] // 2
    dx = np.zeros((cin, d, h, wd), dtype=_F32)
    for ci in prange(cin):
        for dd in range(d):
            for hh in range(h):
                acc = dx[ci, dd, hh]
                for co in range(cout):
                    for a in range(2):
                        for b in range(2):
                            drow = dy[co, 2 * dd + a, 2 * hh + b]
                            w0 = w[ci, co, a, b, 0]
                            w1 = w[ci, co, a, b, 1]
                            for i in range(wd):
                                acc[i] += w0 * drow[2 * i] + w1 * drow[2 * i + 1]
    return dx


@njit(parallel=True, fastmath=True, cache=True)
def tconv3d_grad_w(x, dy):
    cin, d, h, wd = x.shape
    cout = dy.shape[0]
    dw = np.zeros((cin, cout, 2, 2, 2), dtype=_F32)
    for ci in prange(cin):
        for co in range(cout):
            for a in range(2):
                for b in range(2):
                    s0 = 0.0
                    s1 = 0.0
                    for dd in range(d):
                        for hh in range(h):
                            xrow = x[ci, dd, hh]
                            drow = dy[co, 2 * dd + a, 2 * hh + b]
                            for i in range(wd):
                                s0 += xrow[i] * drow[2 * i]
                                s1 += xrow[i] * drow[2 * i + 1]
                    dw[ci, co, a, b, 0] = s0
                    dw[ci, co, a, b, 1] = s1
    return dw


# ---------------------------------------------------------------------------
# cone-beam projector
# ---------------------------------------------------------------------------

@njit(cache=True)
def _clip_ray(sx, sy, sz, dx, dy, dz, xmin, xmax, ymin, ymax, zmin, zmax):
    t0 = 0.0
    t1 = 1.0e300
    for ax in range(3):
        if ax == 0:
            o, d, lo, hi = sx, dx, xmin, xmax
        elif ax == 1:
            o, d, lo, hi = sy, dy, ymin, ymax
        else:
            o, d, lo, hi = sz, dz, zmin, zmax
        if abs(d) < 1e-12:
            if o < lo or o > hi:
                return 0.0, -1.0
        else:
            ta = (lo - o) / d
            tb = (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def _trilinear(vol, fx, fy, fz):
    nx, ny, nz = vol.shape
    ix = int(math.floor(fx))
    iy = int(math.floor(fy))
    iz = int(math.floor(fz))
    ax = fx - ix
    ay = fy - iy
    az = fz - iz
    acc = 0.0
    for cx in range(2):
        gx = ix + cx
        if gx < 0 or gx >= nx:
            continue
        wx = ax if cx == 1 else 1.0 - ax
        for cy in range(2):
            gy = iy + cy
            if gy < 0 or gy >= ny:
                continue
            wy = ay if cy == 1 else 1.0 - ay
            for cz in range(2):
                gz = iz + cz
                if gz < 0 or gz >= nz:
                    continue
                wz = az if cz == 1 else 1.0 - az
                acc += wx * wy * wz * vol[gx, gy, gz]
    return acc


@njit(parallel=True, fastmath=True, cache=True)
def project_forward(vol, vs, ox, oy, oz, angles, sod, sdd, pitch, nr, nc, step):
    nm = angles.shape[0]
    nx, ny, nz = vol.shape
    proj = np.zeros((nm, nr, nc), dtype=_F32)
    xmin = ox - nx * vs / 2.0
    xmax = ox + nx * vs / 2.0
    ymin = oy - ny * vs / 2.0
    ymax = oy + ny * vs / 2.0
    zmin = oz - nz * vs / 2.0
    zmax = oz + nz * vs / 2.0
    for m in prange(nm):
        cb = math.cos(angles[m])
        sb = math.sin(angles[m])
        sx = sod * cb
        sy = sod * sb
        sz = 0.0
        dcx = (sod - sdd) * cb
        dcy = (sod - sdd) * sb
        for r in range(nr):
            v = (r - (nr - 1) / 2.0) * pitch
            for c in range(nc):
                u = (c - (nc - 1) / 2.0) * pitch
                px = dcx - u * sb
                py = dcy + u * cb
                pz = v
                dx = px - sx
                dy = py - sy
                dz = pz - sz
                norm = math.sqrt(dx * dx + dy * dy + dz * dz)
                dx /= norm
                dy /= norm
                dz /= norm
                t0, t1 = _clip_ray(sx, sy, sz, dx, dy, dz,
                                   xmin, xmax, ymin, ymax, zmin, zmax)
                if t1 <= t0:
                    continue
                n = int((t1 - t0) / step)
                acc = 0.0
                for i in range(n):
                    t = t0 + (i + 0.5) * step
                    fx = (sx + t * dx - ox) / vs + (nx - 1) / 2.0
                    fy = (sy + t * dy - oy) / vs + (ny - 1) / 2.0
                    fz = (sz + t * dz - oz) / vs + (nz - 1) / 2.0
                    acc += _trilinear(vol, fx, fy, fz)
                proj[m, r, c] = acc * step
    return proj


# no cache: thread-id intrinsics count as dynamic globals for the cache
@njit(parallel=True, fastmath=True)
def project_adjoint(proj, nx, ny, nz, vs, ox, oy, oz, angles, sod, sdd, pitch, step):
    nm, nr, nc = proj.shape
    nthreads = get_num_threads()
    vols = np.zeros((nthreads, nx, ny, nz), dtype=_F32)
    xmin = ox - nx * vs / 2.0
    xmax = ox + nx * vs / 2.0
    ymin = oy - ny * vs / 2.0
    ymax = oy + ny * vs / 2.0
    zmin = oz - nz * vs / 2.0
    zmax = oz + nz * vs / 2.0
    for m in prange(nm):
        vt = vols[get_thread_id()]
        cb = math.cos(angles[m])
        sb = math.sin(angles[m])
        sx = sod * cb
        sy = sod * sb
        sz = 0.0
        dcx = (sod - sdd) * cb
        dcy = (sod - sdd) * sb
        for r in range(nr):
            v = (r - (nr - 1) / 2.0) * pitch
            for c in range(nc):
                g = proj[m, r, c] * step
                if g == 0.0:
                    continue
                u = (c - (nc - 1) / 2.0) * pitch
                px = dcx - u * sb
                py = dcy + u * cb
                pz = v
                dx = px - sx
                dy = py - sy
                dz = pz - sz
                norm = math.sqrt(dx * dx + dy * dy + dz * dz)
                dx /= norm
                dy /= norm
                dz /= norm
                t0, t1 = _clip_ray(sx, sy, sz, dx, dy, dz,
                                   xmin, xmax, ymin, ymax, zmin, zmax)
                if t1 <= t0:
                    continue
                n = int((t1 - t0) / step)
                for i in range(n):
                    t = t0 + (i + 0.5) * step
                    fx = (sx + t * dx - ox) / vs + (nx - 1) / 2.0
                    fy = (sy + t * dy - oy) / vs + (ny - 1) / 2.0
                    fz = (sz + t * dz - oz) / vs + (nz - 1) / 2.0
                    ix = int(math.floor(fx))
                    iy = int(math.floor(fy))
                    iz = int(math.floor(fz))
                    ax = fx - ix
                    ay = fy - iy
                    az = fz - iz
                    for cx in range(2):
                        gx = ix + cx
                        if gx < 0 or gx >= nx:
                            continue
                        wx = ax if cx == 1 else 1.0 - ax
                        for cy in range(2):
                            gy = iy + cy
                            if gy < 0 or gy >= ny:
                                continue
                            wy = ay if cy == 1 else 1.0 - ay
                            for cz in range(2):
                                gz = iz + cz
                                if gz < 0 or gz >= nz:
                                    continue
                                wz = az if cz == 1 else 1.0 - az
                                vt[gx, gy, gz] += g * wx * wy * wz
    out = np.zeros((nx, ny, nz), dtype=np.float64)
    for t in range(nthreads):
        out += vols[t]
    return out.astype(_F32)


@njit(parallel=True, fastmath=True, cache=True)
def fdk_backproject(filt, nx, ny, nz, vs, ox, oy, oz, angles, sod, sdd, pitch):
    nm, nr, nc = filt.shape
    pitch_iso = pitch * sod / sdd
    vol = np.zeros((nx, ny, nz), dtype=_F32)
    cbs = np.cos(angles)
    sbs = np.sin(angles)
    for i in prange(nx):
        x = (i - (nx - 1) / 2.0) * vs + ox
        acc = np.zeros(nz, dtype=np.float64)
        for j in range(ny):
            y = (j - (ny - 1) / 2.0) * vs + oy
            acc[:] = 0.0
            for m in range(nm):
                cb = cbs[m]
                sb = sbs[m]
                t = sod - x * cb - y * sb
                if t <= 1e-6:
                    continue
                w2 = (sod / t) * (sod / t)
                fu = (-x * sb + y * cb) * sod / (t * pitch_iso) + (nc - 1) / 2.0
                iu = int(math.floor(fu))
                du = fu - iu
                if iu < -1 or iu > nc - 1:
                    continue
                zscale = sod / (t * pitch_iso)
                fv0 = (-(nz - 1) / 2.0 * vs + oz) * zscale + (nr - 1) / 2.0
                dfv = vs * zscale
                img = filt[m]
                for k in range(nz):
                    fv = fv0 + k * dfv
                    iv = int(math.floor(fv))
                    if iv < -1 or iv > nr - 1:
                        continue
                    dv = fv - iv
                    val = 0.0
                    if iu >= 0:
                        if iv >= 0:
                            val += (1.0 - du) * (1.0 - dv) * img[iv, iu]
                        if iv + 1 < nr:
                            val += (1.0 - du) * dv * img[iv + 1, iu]
                    if iu + 1 < nc:
                        if iv >= 0:
                            val += du * (1.0 - dv) * img[iv, iu + 1]
                        if iv + 1 < nr:
                            val += du * dv * img[iv + 1, iu + 1]
                    acc[k] += w2 * val
            for k in range(nz):
                vol[i, j, k] = acc[k]
    return vol
