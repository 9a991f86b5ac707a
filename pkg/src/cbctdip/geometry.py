"""Acquisition geometry, voxel grids, volumes and projection stacks.

Conventions: right-handed world frame, rotation axis = z, all lengths in
mm. At view angle beta the source sits at sod*(cos b, sin b, 0); the flat
detector is centred on the ray through the rotation axis, with axes
e_u = (-sin b, cos b, 0) (columns) and e_v = (0, 0, 1) (rows). Voxel
(i, j, k) of a grid is centred at origin + (idx - (n-1)/2) * voxel_size
per axis, so the grid centre sits at ``origin`` (the rotation axis by
default). View angles are endpoint-exclusive: k * arc / n_views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Non-physical or inconsistent acquisition geometry."""


@dataclass(frozen=True)
class ScanGeometry:
    """Circular-orbit cone-beam acquisition description."""

    sod: float                 # source to rotation axis (mm)
    sdd: float                 # source to detector (mm)
    det_rows: int
    det_cols: int
    det_pitch: float           # mm per detector pixel
    n_views: int
    arc: float                 # total angular coverage (degrees)
    view_angles: np.ndarray = field(default=None, repr=False)  # radians

    def __post_init__(self):
        if not (self.sdd > self.sod > 0):
            raise GeometryError(f"need sdd > sod > 0, got sod={self.sod}, sdd={self.sdd}")
        if min(self.det_rows, self.det_cols, self.n_views) < 1:
            raise GeometryError("detector dims and n_views must be >= 1")
        if self.det_pitch <= 0:
            raise GeometryError(f"det_pitch must be > 0, got {self.det_pitch}")
        if not (0 < self.arc <= 360):
            raise GeometryError(f"arc must be in (0, 360], got {self.arc}")
        if self.view_angles is None:
            angles = np.deg2rad(self.arc) * np.arange(self.n_views) / self.n_views
            object.__setattr__(self, "view_angles", angles)
        else:
            angles = np.asarray(self.view_angles, dtype=np.float64)
            object.__setattr__(self, "view_angles", angles)
        if len(self.view_angles) != self.n_views:
            raise GeometryError(
                f"{len(self.view_angles)} view angles for n_views={self.n_views}"
            )
        if self.n_views > 1 and not np.all(np.diff(self.view_angles) > 0):
            raise GeometryError("view angles must be strictly increasing")

    def with_views(self, angles: np.ndarray) -> "ScanGeometry":
        return ScanGeometry(self.sod, self.sdd, self.det_rows, self.det_cols,
                            self.det_pitch, len(angles), self.arc,
                            np.asarray(angles, dtype=np.float64))


def make_circular_geometry(sod, sdd, det_rows, det_cols, det_pitch,
                           n_views, arc) -> ScanGeometry:
    """Uniformly spaced circular cone-beam geometry over the given arc."""
    return ScanGeometry(float(sod), float(sdd), int(det_rows), int(det_cols),
                        float(det_pitch), int(n_views), float(arc))


@dataclass(frozen=True)
class VolumeGrid:
    nx: int
    ny: int
    nz: int
    voxel_size: float                       # mm
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)  # grid centre (mm)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise GeometryError("grid dims must be >= 1")
        if self.voxel_size <= 0:
            raise GeometryError(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World coordinates of voxel centres along each axis."""
        return tuple(
            (np.arange(n) - (n - 1) / 2.0) * self.voxel_size + o
            for n, o in zip(self.shape, self.origin)
        )


def cube_grid(n: int, voxel_size: float = 1.0) -> VolumeGrid:
    return VolumeGrid(n, n, n, voxel_size)


@dataclass(frozen=True)
class Volume:
    """Voxel grid plus a (nx, ny, nz) float32 array of attenuation values."""

    grid: VolumeGrid
    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float32)
        if a.shape != self.grid.shape:
            raise GeometryError(f"volume data {a.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(a)):
            raise GeometryError("volume contains non-finite values")
        object.__setattr__(self, "data", a)


@dataclass(frozen=True)
class ProjectionSet:
    """Stack of detector images, one per view (line-integral units)."""

    geometry: ScanGeometry
    data: np.ndarray           # (n_views, det_rows, det_cols) float32

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float32)
        g = self.geometry
        if a.shape != (g.n_views, g.det_rows, g.det_cols):
            raise GeometryError(
                f"projection data {a.shape} does not match geometry "
                f"{(g.n_views, g.det_rows, g.det_cols)}"
            )
        if not np.all(np.isfinite(a)):
            raise GeometryError("projections contain non-finite values")
        object.__setattr__(self, "data", a)


def subsample_views(proj: ProjectionSet, m: int) -> ProjectionSet:
    """Keep m views at uniform angular stride (floor(k * M / m) indexing)."""
    n = proj.geometry.n_views
    if not 1 <= m <= n:
        raise GeometryError(f"cannot select {m} views from {n}")
    idx = (np.arange(m) * n) // m
    geom = proj.geometry.with_views(proj.geometry.view_angles[idx])
    return ProjectionSet(geom, proj.data[idx])


def normalize_volume(v: Volume) -> tuple[Volume, float]:
    """Clip negatives and scale by the maximum; returns (volume, constant)."""
    clipped = np.clip(v.data, 0.0, None)
    c = float(clipped.max())
    if c == 0.0:
        return Volume(v.grid, clipped), 1.0
    return Volume(v.grid, clipped / np.float32(c)), c
