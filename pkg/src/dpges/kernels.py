"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``DPGES_BACKEND=python`` forces the fallback, ``=cython`` makes a
missing extension an error.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_requested = os.environ.get("DPGES_BACKEND", "auto").lower()
_compiled = None
if _requested != "python":
    try:
        from . import _kernels as _compiled
    except ImportError as exc:
        if _requested == "cython":
            raise
        log.debug("compiled kernels unavailable (%s); using numpy fallback", exc)

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

_active = "cython" if _compiled is not None else "python"


def backend_name() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}")
    _active = name


def get(name: str | None = None):
    return BACKENDS[name or _active]


def peel_layers(*args, backend=None):
    return get(backend).peel_layers(*args)


def splat_forward(*args, backend=None):
    return get(backend).splat_forward(*args)


def splat_backward(*args, backend=None):
    return get(backend).splat_backward(*args)
