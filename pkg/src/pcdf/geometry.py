"""Rotated-box IoU backend selection.

The compiled kernel is used when the extension was built; otherwise, or when
``PCDF_PURE_PYTHON=1`` is set, the pure-Python implementation is used.  Both
expose ``rotated_iou(a, b)`` and ``rotated_iou_matrix(A, B)`` over
``(cx, cy, w, h, theta)`` rows.
"""

import os

from ._ext import geometry_py

BACKEND = "python"
_impl = geometry_py
if os.environ.get("PCDF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import _geometry as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

rotated_iou = _impl.rotated_iou
rotated_iou_matrix = _impl.rotated_iou_matrix
box_corners = geometry_py.box_corners
polygon_area = geometry_py.polygon_area
clip_polygon = geometry_py.clip_polygon
