"""Kernel backend selection: compiled extension when available, numpy fallback.

Set SGINSERT_KERNELS=python (or =compiled) to force a backend; SGINSERT_THREADS
caps the compiled backend's OpenMP parallelism.
"""

from __future__ import annotations

import os

import numpy as np

from . import pykernels

_forced = os.environ.get("SGINSERT_KERNELS", "").strip().lower()
_impl = None
if _forced in ("python", "py"):
    _impl = pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _forced in ("compiled", "c"):
            raise
        _impl = pykernels


def backend_name():
    return _impl.BACKEND


def get_backend(name=None):
    """Return a kernel module by name ('compiled'/'python'); default = active."""
    if name is None:
        return _impl
    if name in ("python", "py"):
        return pykernels
    if name in ("compiled", "c"):
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def default_threads():
    try:
        return max(0, int(os.environ.get("SGINSERT_THREADS", "0")))
    except ValueError:
        return 0


def _c3(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def march_rays(density, emission, bbox_min, cell, origins, dirs, t0, t1, step,
               max_steps=1_000_000, stop_transmittance=1e-7, impl=None):
    impl = impl or _impl
    return impl.march_rays(
        _c3(density), _c3(emission), _c3(bbox_min), _c3(cell),
        _c3(origins), _c3(dirs), _c3(t0), _c3(t1), float(step),
        max_steps, stop_transmittance, default_threads(),
    )


def mesh_hit(nodes, tris, origins, dirs, t_min=1e-9, t_max=np.inf, impl=None):
    impl = impl or _impl
    return impl.mesh_hit(nodes, tris, _c3(origins), _c3(dirs), float(t_min),
                         float(t_max), default_threads())


def mesh_any(nodes, tris, origins, dirs, t_min=1e-9, t_max=np.inf, impl=None):
    impl = impl or _impl
    return impl.mesh_any(nodes, tris, _c3(origins), _c3(dirs), float(t_min),
                         float(t_max), default_threads())
