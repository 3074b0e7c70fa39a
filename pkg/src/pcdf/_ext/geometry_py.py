"""Pure-Python rotated-rectangle IoU (Sutherland-Hodgman clipping)."""

import math

import numpy as np

EPS = 1e-9


def box_corners(cx, cy, w, h, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    hw = 0.5 * w
    hh = 0.5 * h
    pts = []
    for dx, dy in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
        pts.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return pts


def polygon_area(pts):
    n = len(pts)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_polygon(subject, clip):
    """Clip ``subject`` by the convex counter-clockwise polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            p_in = dp >= -EPS
            q_in = dq >= -EPS
            if q_in:
                if not p_in:
                    t = dp / (dp - dq)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif p_in:
                t = dp / (dp - dq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def rotated_iou(a, b):
    """IoU of two boxes given as (cx, cy, w, h, theta); zero-area input gives 0."""
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    pa = box_corners(a[0], a[1], a[2], a[3], a[4])
    pb = box_corners(b[0], b[1], b[2], b[3], b[4])
    inter = abs(polygon_area(clip_polygon(pa, pb)))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def rotated_iou_matrix(boxes_a, boxes_b):
    boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    la = boxes_a.tolist()
    lb = boxes_b.tolist()
    for i, a in enumerate(la):
        for j, b in enumerate(lb):
            out[i, j] = rotated_iou(a, b)
    return out
