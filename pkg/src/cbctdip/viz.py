"""Figure-ready slice exports."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .geometry import Volume

_AXES = {0: "x", 1: "y", 2: "z"}


def export_slices(v: Volume, axis: int, indices, out_dir,
                  error_against: Volume | None = None) -> list[str]:
    """Write 8-bit grayscale PNGs of the selected slices.

    Plain mode windows values to [0, 1]. With error_against set, each
    slice is the normalised absolute difference |a - b| / max|a - b|
    (all black when the volumes are identical).
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = v.data.shape[axis]
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"slice {i} out of range for axis {axis} of size {n}")
    if error_against is not None:
        if error_against.data.shape != v.data.shape:
            raise ValueError(
                f"error volume {error_against.data.shape} vs {v.data.shape}"
            )
        err = np.abs(v.data - error_against.data)
        m = float(err.max())
        field = err / m if m > 0 else err
        prefix = "errmap"
    else:
        field = np.clip(v.data, 0.0, 1.0)
        prefix = "slice"

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in indices:
        sl = np.take(field, i, axis=axis)
        img = Image.fromarray(np.round(sl * 255.0).astype(np.uint8), mode="L")
        path = os.path.join(out_dir, f"{prefix}_{_AXES[axis]}{i:04d}.png")
        img.save(path)
        paths.append(path)
    return paths
