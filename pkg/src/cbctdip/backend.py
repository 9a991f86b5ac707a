"""Kernel backend selection.

The hot numeric kernels (3D/2D convolutions, transposed convolutions,
cone-beam projection/backprojection) exist twice: a numba ``@njit``
implementation and a pure-numpy fallback.  The active backend is chosen
once, lazily, from the ``CBCTDIP_BACKEND`` environment variable:

    CBCTDIP_BACKEND=numba   force the numba kernels (error if numba missing)
    CBCTDIP_BACKEND=numpy   force the vectorised numpy fallback
    unset / "auto"          numba when importable, numpy otherwise

``set_backend()`` overrides the choice programmatically (used by the
parity tests and the benchmark). Outputs of the two backends agree to
float32 round-off; see benchmarks/bench_backends.py for speed numbers.
"""

from __future__ import annotations

import os

_VALID = ("auto", "numba", "numpy")

_forced: str | None = None
_resolved: str | None = None


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def set_backend(name: str | None) -> None:
    """Force a backend ("numba" / "numpy"), or None to re-resolve from env."""
    global _forced, _resolved
    if name is not None and name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}, expected 'numba' or 'numpy'")
    _forced = name
    _resolved = None


def active_backend() -> str:
    """Name of the backend that kernel calls will dispatch to."""
    global _resolved
    if _forced is not None:
        return _forced
    if _resolved is None:
        env = os.environ.get("CBCTDIP_BACKEND", "auto").lower()
        if env not in _VALID:
            raise ValueError(
                f"CBCTDIP_BACKEND={env!r} not understood, expected one of {_VALID}"
            )
        if env == "auto":
            _resolved = "numba" if numba_available() else "numpy"
        elif env == "numba" and not numba_available():
            raise ImportError("CBCTDIP_BACKEND=numba but numba is not importable")
        else:
            _resolved = env
    return _resolved
