"""Matched cone-beam forward and back projector.

Forward projection is ray-driven with trilinear interpolation at a fixed
step of half the voxel size; rays that miss the volume contribute exactly
zero. The back projector scatters the same per-sample trilinear weights,
making the pair an algebraically matched adjoint under the shared
sampling scheme.
"""

from __future__ import annotations

from . import kernels
from .geometry import ProjectionSet, ScanGeometry, Volume, VolumeGrid


def forward_project(v: Volume, g: ScanGeometry) -> ProjectionSet:
    """Line integrals of the volume onto every detector pixel."""
    step = v.grid.voxel_size / 2.0
    data = kernels.project_forward(
        v.data, v.grid.voxel_size, v.grid.origin, g.view_angles,
        g.sod, g.sdd, g.det_pitch, g.det_rows, g.det_cols, step,
    )
    return ProjectionSet(g, data)


def back_project(p: ProjectionSet, grid: VolumeGrid) -> Volume:
    """Exact adjoint of forward_project for the same grid and geometry."""
    g = p.geometry
    step = grid.voxel_size / 2.0
    data = kernels.project_adjoint(
        p.data, grid.shape, grid.voxel_size, grid.origin, g.view_angles,
        g.sod, g.sdd, g.det_pitch, step,
    )
    return Volume(grid, data)
