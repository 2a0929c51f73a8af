"""Hot kernels: compiled extension when built, pure Python otherwise.

Set ``GRANOGEN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from granogen.kernels import _pure

if os.environ.get("GRANOGEN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pure
else:
    try:
        from granogen.kernels import _core as _impl
    except ImportError:  # extension not built
        _impl = _pure

BACKEND = "python" if _impl is _pure else "compiled"

edt_sq_lines = _impl.edt_sq_lines
flood = _impl.flood

__all__ = ["BACKEND", "edt_sq_lines", "flood"]
