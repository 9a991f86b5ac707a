"""Binary container I/O for volumes, projection stacks and parameter sets.

Common container layout: an 8-byte ASCII magic, a 4-byte little-endian
header length, a UTF-8 JSON header, then a float32 little-endian payload.

  CBCTVOL1  volume;      header {nx, ny, nz, voxel_size_mm, origin_mm},
            payload nx*ny*nz floats in x-fastest order.
  CBCTPRJ1  projections; header carries the full scan geometry including
            explicit view angles, payload view-major images, columns
            fastest within a row.
  CBCTPAR1  parameters;  header {tensors: [{name, shape}, ...]}, payload
            the tensors concatenated in manifest order, C layout.

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from typing import BinaryIO

import numpy as np

from .autodiff import ParamStore
from .geometry import (GeometryError, ProjectionSet, ScanGeometry, Volume,
                       VolumeGrid)

MAGIC_VOL = b"CBCTVOL1"
MAGIC_PRJ = b"CBCTPRJ1"
MAGIC_PAR = b"CBCTPAR1"


class FormatError(ValueError):
    """Malformed container: bad magic, metadata, or payload size."""


def _write_container(f: BinaryIO, magic: bytes, header: dict, payload: bytes) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(len(blob).to_bytes(4, "little"))
    f.write(blob)
    f.write(payload)


def _read_container(f: BinaryIO, magic: bytes) -> tuple[dict, bytes]:
    got = f.read(8)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    raw_len = f.read(4)
    if len(raw_len) != 4:
        raise FormatError("truncated header length")
    n = int.from_bytes(raw_len, "little")
    blob = f.read(n)
    if len(blob) != n:
        raise FormatError("truncated JSON header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable JSON header: {e}") from e
    return header, f.read()


def save_volume(v: Volume, path: str | os.PathLike) -> None:
    header = {
        "nx": v.grid.nx, "ny": v.grid.ny, "nz": v.grid.nz,
        "voxel_size_mm": v.grid.voxel_size,
        "origin_mm": list(v.grid.origin),
    }
    payload = v.data.astype("<f4").tobytes(order="F")  # x fastest
    with open(path, "wb") as f:
        _write_container(f, MAGIC_VOL, header, payload)


def load_volume(path: str | os.PathLike) -> Volume:
    with open(path, "rb") as f:
        header, payload = _read_container(f, MAGIC_VOL)
    try:
        grid = VolumeGrid(int(header["nx"]), int(header["ny"]), int(header["nz"]),
                          float(header["voxel_size_mm"]),
                          tuple(header.get("origin_mm", (0.0, 0.0, 0.0))))
    except (KeyError, TypeError, ValueError, GeometryError) as e:
        raise FormatError(f"invalid volume header: {e}") from e
    expected = grid.nx * grid.ny * grid.nz * 4
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(grid.shape, order="F")
    return Volume(grid, np.ascontiguousarray(data))


def save_projections(p: ProjectionSet, path: str | os.PathLike) -> None:
    g = p.geometry
    header = {
        "geometry": {
            "sod": g.sod, "sdd": g.sdd,
            "det_rows": g.det_rows, "det_cols": g.det_cols,
            "det_pitch_mm": g.det_pitch,
            "n_views": g.n_views, "arc_deg": g.arc,
            "view_angles_rad": [float(a) for a in g.view_angles],
        }
    }
    payload = p.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as f:
        _write_container(f, MAGIC_PRJ, header, payload)


def load_projections(path: str | os.PathLike) -> ProjectionSet:
    with open(path, "rb") as f:
        header, payload = _read_container(f, MAGIC_PRJ)
    try:
        h = header["geometry"]
        geom = ScanGeometry(
            float(h["sod"]), float(h["sdd"]),
            int(h["det_rows"]), int(h["det_cols"]), float(h["det_pitch_mm"]),
            int(h["n_views"]), float(h["arc_deg"]),
            np.asarray(h["view_angles_rad"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError, GeometryError) as e:
        raise FormatError(f"invalid projection header: {e}") from e
    expected = geom.n_views * geom.det_rows * geom.det_cols * 4
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(
        geom.n_views, geom.det_rows, geom.det_cols
    )
    return ProjectionSet(geom, np.ascontiguousarray(data))


def save_params(store: ParamStore, path: str | os.PathLike) -> None:
    manifest = [{"name": k, "shape": list(t.data.shape)} for k, t in store.items()]
    payload = b"".join(t.data.astype("<f4").tobytes(order="C") for _, t in store.items())
    with open(path, "wb") as f:
        _write_container(f, MAGIC_PAR, {"tensors": manifest}, payload)


def load_params(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Named arrays from a CBCTPAR1 container, in manifest order."""
    with open(path, "rb") as f:
        header, payload = _read_container(f, MAGIC_PAR)
    try:
        manifest = [(e["name"], tuple(int(s) for s in e["shape"]))
                    for e in header["tensors"]]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid parameter manifest: {e}") from e
    total = sum(int(np.prod(s)) for _, s in manifest) * 4
    if len(payload) != total:
        raise FormatError(f"payload is {len(payload)} bytes, expected {total}")
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        out[name] = arr.reshape(shape).copy()
        offset += n * 4
    return out
