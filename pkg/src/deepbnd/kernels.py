"""Backend selection for the hot element kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``DEEPBND_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the NumPy implementation is used.
"""
import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("DEEPBND_PURE_PYTHON", "") not in ("", "0")

_compiled = None
if not _force_py:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def element_matrices(nodes, cells, dshape, qweights, D, backend=None):
    impl = _pick(backend)
    return impl.element_matrices(
        np.ascontiguousarray(nodes, dtype=np.float64),
        np.ascontiguousarray(cells, dtype=np.int64),
        np.ascontiguousarray(dshape, dtype=np.float64),
        np.ascontiguousarray(qweights, dtype=np.float64),
        np.ascontiguousarray(D, dtype=np.float64),
    )


def inclusion_indicator(points, x0, y0, spacing, nx, ny, centres, radii, gamma,
                        backend=None):
    impl = _pick(backend)
    return impl.inclusion_indicator(
        np.ascontiguousarray(points, dtype=np.float64),
        float(x0), float(y0), float(spacing), int(nx), int(ny),
        np.ascontiguousarray(centres, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(radii, dtype=np.float64),
        float(gamma),
    )


def _pick(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "python":
        return _kernels_py
    raise ValueError(f"unknown backend {backend!r}")
