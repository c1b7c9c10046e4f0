"""Selection between the compiled kernels and their numpy fallback.

The compiled ``_ext`` module is used when importable. ``RSCNET_BACKEND``
(``ext`` or ``python``) forces a choice at import; :func:`set_backend` switches
at runtime (tests and the benchmark compare both).
"""
import os

from . import _fallback

try:
    from . import _ext
except ImportError:  # extension not built
    _ext = None

_BACKENDS = {"python": _fallback}
if _ext is not None:
    _BACKENDS["ext"] = _ext


def _initial_backend():
    wanted = os.environ.get("RSCNET_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in ("ext", "python"):
            raise ValueError(f"RSCNET_BACKEND must be 'ext' or 'python', got {wanted!r}")
        if wanted not in _BACKENDS:
            raise ImportError("RSCNET_BACKEND=ext but rscnet.numerics._ext is not built")
        return wanted
    return "ext" if "ext" in _BACKENDS else "python"


_active = [_initial_backend()]


def available_backends():
    return sorted(_BACKENDS)


def get_backend():
    return _active[0]


def set_backend(name):
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    _active[0] = name


def kernels():
    return _BACKENDS[_active[0]]
