"""IoU and linking kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported.  Setting ``TUBEMIL_PURE_PYTHON=1`` forces the fallback.
``BACKEND`` names the implementation in use.
"""
import os

from . import _fallback

if os.environ.get("TUBEMIL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "cython" if _impl is not _fallback else "python"

iou_one_to_many = _impl.iou_one_to_many
iou_matrix = _impl.iou_matrix
best_link = _impl.best_link
any_overlap = _impl.any_overlap

__all__ = ["BACKEND", "iou_one_to_many", "iou_matrix", "best_link", "any_overlap"]
