"""Backend selection for the count event loop.

The compiled extension is used when it imports; otherwise, or when
``SUPERBRANCH_BACKEND=python`` is set, the pure-Python loop is used.
"""

import os

from . import _pykernel

STATUS_OK = _pykernel.STATUS_OK
STATUS_EVENTS = _pykernel.STATUS_EVENTS
STATUS_POPULATION = _pykernel.STATUS_POPULATION

try:
    from . import _kernel as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _pykernel.run_counts}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled.run_counts

_requested = os.environ.get("SUPERBRANCH_BACKEND", "").strip().lower()
if _requested and _requested not in ("python", "compiled"):
    raise ImportError(f"SUPERBRANCH_BACKEND must be 'python' or 'compiled', got {_requested!r}")
if _requested == "compiled" and _compiled is None:
    raise ImportError("SUPERBRANCH_BACKEND=compiled but the extension is not built")

BACKEND = _requested or ("compiled" if _compiled is not None else "python")
run_counts = BACKENDS[BACKEND]


def get_backend(name=None):
    """Return the ``run_counts`` implementation called ``name`` (default: active)."""
    if name is None:
        return run_counts
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available; have {sorted(BACKENDS)}") from None
