"""Backend-dispatched hot kernels.

Thin wrappers that normalise dtypes, apply zero-padding, and route to the
numba or numpy implementation chosen by cbctdip.backend. Gradients with
respect to convolution inputs are computed as full correlations with
spatially flipped, channel-swapped weights, so each backend only has to
provide forward and weight-gradient kernels.
"""

from __future__ import annotations

import importlib

import numpy as np

from .. import backend as _backend

_impl_cache: dict[str, object] = {}


def _impl():
    name = _backend.active_backend()
    mod = _impl_cache.get(name)
    if mod is None:
        mod = importlib.import_module(f".{name}_impl", package=__name__)
        _impl_cache[name] = mod
    return mod


def _f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def _pad3(x: np.ndarray, pad: tuple[int, int, int]) -> np.ndarray:
    pd, ph, pw = pad
    if pd == 0 and ph == 0 and pw == 0:
        return _f32(x)
    return np.pad(_f32(x), ((0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _pad2(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    if ph == 0 and pw == 0:
        return _f32(x)
    return np.pad(_f32(x), ((0, 0), (ph, ph), (pw, pw)))


# -- 3D convolution, stride 1 ------------------------------------------------

def conv3d_forward(x, w, pad=(0, 0, 0)):
    return _impl().conv3d_forward(_pad3(x, pad), _f32(w))


def conv3d_grad_w(x, dy, pad=(0, 0, 0)):
    return _impl().conv3d_grad_w(_pad3(x, pad), _f32(dy))


def conv3d_grad_x(dy, w, pad, x_shape):
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    wt = np.ascontiguousarray(
        w[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1), dtype=np.float32
    )
    full = _impl().conv3d_forward(_pad3(dy, (kd - 1, kh - 1, kw - 1)), wt)
    pd, ph, pw = pad
    d, h, wd = x_shape[1], x_shape[2], x_shape[3]
    return np.ascontiguousarray(full[:, pd:pd + d, ph:ph + h, pw:pw + wd])


# -- 2D convolution, stride 1 ------------------------------------------------

def conv2d_forward(x, w, pad=(0, 0)):
    return _impl().conv2d_forward(_pad2(x, pad), _f32(w))


def conv2d_grad_w(x, dy, pad=(0, 0)):
    return _impl().conv2d_grad_w(_pad2(x, pad), _f32(dy))


def conv2d_grad_x(dy, w, pad, x_shape):
    kh, kw = w.shape[2], w.shape[3]
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].swapaxes(0, 1), dtype=np.float32)
    full = _impl().conv2d_forward(_pad2(dy, (kh - 1, kw - 1)), wt)
    ph, pw = pad
    h, wd = x_shape[1], x_shape[2]
    return np.ascontiguousarray(full[:, ph:ph + h, pw:pw + wd])


# -- transposed 3D convolution, kernel 2, stride 2 ----------------------------

def tconv3d_forward(x, w):
    return _impl().tconv3d_forward(_f32(x), _f32(w))


def tconv3d_grad_x(dy, w):
    return _impl().tconv3d_grad_x(_f32(dy), _f32(w))


def tconv3d_grad_w(x, dy):
    return _impl().tconv3d_grad_w(_f32(x), _f32(dy))


# -- cone-beam projector -------------------------------------------------------

def project_forward(vol, vs, origin, angles, sod, sdd, pitch, nr, nc, step):
    ox, oy, oz = (float(origin[0]), float(origin[1]), float(origin[2]))
    return _impl().project_forward(
        _f32(vol), float(vs), ox, oy, oz,
        np.ascontiguousarray(angles, dtype=np.float64),
        float(sod), float(sdd), float(pitch), int(nr), int(nc), float(step),
    )


def project_adjoint(proj, vol_shape, vs, origin, angles, sod, sdd, pitch, step):
    nx, ny, nz = (int(vol_shape[0]), int(vol_shape[1]), int(vol_shape[2]))
    ox, oy, oz = (float(origin[0]), float(origin[1]), float(origin[2]))
    return _impl().project_adjoint(
        _f32(proj), nx, ny, nz, float(vs), ox, oy, oz,
        np.ascontiguousarray(angles, dtype=np.float64),
        float(sod), float(sdd), float(pitch), float(step),
    )


def fdk_backproject(filt, vol_shape, vs, origin, angles, sod, sdd, pitch):
    nx, ny, nz = (int(vol_shape[0]), int(vol_shape[1]), int(vol_shape[2]))
    ox, oy, oz = (float(origin[0]), float(origin[1]), float(origin[2]))
    return _impl().fdk_backproject(
        _f32(filt), nx, ny, nz, float(vs), ox, oy, oz,
        np.ascontiguousarray(angles, dtype=np.float64),
        float(sod), float(sdd), float(pitch),
    )
