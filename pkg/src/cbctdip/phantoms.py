"""Synthetic ground-truth volumes for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .geometry import Volume, VolumeGrid

PHANTOM_KINDS = ("uniform_ball", "shepp_logan_3d", "nested_shells")

# Modified 3D Shepp-Logan ellipsoids: value, semi-axes (a, b, c), centre
# (x0, y0, z0), rotation about z (degrees). Coordinates are normalised to
# [-1, 1] per axis.
_SHEPP_LOGAN = [
    (1.00, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00, 0.0),
    (-0.80, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00, 0.0),
    (-0.20, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0),
    (-0.20, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0),
    (0.10, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15, 0.0),
    (0.10, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25, 0.0),
    (0.10, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25, 0.0),
    (0.10, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00, 0.0),
    (0.10, 0.0230, 0.023, 0.020, 0.00, -0.6060, 0.00, 0.0),
    (0.10, 0.0230, 0.046, 0.020, 0.06, -0.6050, 0.00, 0.0),
]


def _radius_field(grid: VolumeGrid) -> np.ndarray:
    xs, ys, zs = grid.axis_coords()
    gx, gy, gz = np.meshgrid(xs - grid.origin[0], ys - grid.origin[1],
                             zs - grid.origin[2], indexing="ij")
    return np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)


def _extent(grid: VolumeGrid) -> float:
    return min(grid.nx, grid.ny, grid.nz) * grid.voxel_size


def _uniform_ball(grid: VolumeGrid) -> np.ndarray:
    r = 0.4 * _extent(grid)
    return (_radius_field(grid) <= r).astype(np.float32)


def _shepp_logan_3d(grid: VolumeGrid) -> np.ndarray:
    coords = [
        (np.arange(n) - (n - 1) / 2.0) / ((n - 1) / 2.0 if n > 1 else 1.0)
        for n in grid.shape
    ]
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    vol = np.zeros(grid.shape, dtype=np.float64)
    for val, a, b, c, x0, y0, z0, phi_deg in _SHEPP_LOGAN:
        phi = np.deg2rad(phi_deg)
        cx, cy, cz = gx - x0, gy - y0, gz - z0
        xr = cx * np.cos(phi) + cy * np.sin(phi)
        yr = -cx * np.sin(phi) + cy * np.cos(phi)
        inside = (xr / a) ** 2 + (yr / b) ** 2 + (cz / c) ** 2 <= 1.0
        vol[inside] += val
    vol = np.clip(vol, 0.0, None)
    m = vol.max()
    if m > 1.0:
        vol /= m
    return vol.astype(np.float32)


def _nested_shells(grid: VolumeGrid, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n_shells = int(rng.integers(3, 6))
    r_outer = 0.45 * _extent(grid)
    fracs = np.sort(rng.uniform(0.25, 0.95, size=n_shells - 1))[::-1]
    radii = np.concatenate(([r_outer], r_outer * fracs))
    values = rng.uniform(0.2, 1.0, size=n_shells)
    dist = _radius_field(grid)
    vol = np.zeros(grid.shape, dtype=np.float32)
    for r, v in zip(radii, values):
        vol[dist <= r] = np.float32(v)
    return vol


def make_phantom(kind: str, grid: VolumeGrid, seed: int = 0) -> Volume:
    """Deterministic phantom with values in [0, 1]."""
    if kind == "uniform_ball":
        data = _uniform_ball(grid)
    elif kind == "shepp_logan_3d":
        data = _shepp_logan_3d(grid)
    elif kind == "nested_shells":
        data = _nested_shells(grid, seed)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}, expected one of {PHANTOM_KINDS}")
    return Volume(grid, data)
