"""Kernel dispatch: compiled extension when available, pure fallback otherwise."""
import os

from . import _pure

BACKEND = "pure"
if os.environ.get("SATGNN_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _pure
else:
    _impl = _pure

csr_matmul = _impl.csr_matmul
polyline_encode_rows = _impl.polyline_encode_rows
polyline_decode_rows = _impl.polyline_decode_rows

__all__ = ["BACKEND", "csr_matmul", "polyline_encode_rows", "polyline_decode_rows"]
