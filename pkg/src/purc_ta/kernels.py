"""Backend selection for the per-iteration kernel.

The compiled extension is used when it imported successfully, unless
``PURC_BACKEND=python`` is set. It only covers the entropy perturbation; other
perturbations always run on the numpy fallback.
"""

from __future__ import annotations

import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

COMPILED_AVAILABLE = _ckernels is not None


def default_backend() -> str:
    requested = os.environ.get("PURC_BACKEND", "auto").strip().lower() or "auto"
    if requested not in ("auto", "compiled", "python"):
        raise ValueError(f"PURC_BACKEND must be auto, compiled or python, not {requested!r}")
    if requested == "python":
        return "python"
    if requested == "compiled" and not COMPILED_AVAILABLE:
        raise ImportError("PURC_BACKEND=compiled but the compiled kernel is not built")
    return "compiled" if COMPILED_AVAILABLE else "python"


def get_iterate(backend: str = "auto"):
    """Return ``(name, iterate)`` for ``backend`` in {auto, compiled, python}."""
    if backend == "auto":
        backend = default_backend()
    if backend == "compiled":
        if not COMPILED_AVAILABLE:
            raise ImportError("compiled kernel is not available")
        return "compiled", _ckernels.iterate
    if backend == "python":
        return "python", _fallback.iterate
    raise ValueError(f"unknown backend {backend!r}")


def thread_count() -> int:
    """Worker count from ``PURC_THREADS``; 0 (or unset) means automatic."""
    raw = os.environ.get("PURC_THREADS", "").strip()
    if not raw:
        return 0
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PURC_THREADS must be an integer, not {raw!r}") from None
    if n < 0:
        raise ValueError("PURC_THREADS must be non-negative")
    return n
