# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rotated-rectangle IoU; mirrors geometry_py line for line."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs

cnp.import_array()

cdef enum:
    MAXV = 16
cdef double EPS = 1e-9


cdef inline void _corners(double cx, double cy, double w, double h, double theta,
                          double* xs, double* ys) noexcept nogil:
    cdef double c = cos(theta)
    cdef double s = sin(theta)
    cdef double hw = 0.5 * w
    cdef double hh = 0.5 * h
    cdef double dx[4]
    cdef double dy[4]
    dx[0] = -hw; dy[0] = -hh
    dx[1] = hw;  dy[1] = -hh
    dx[2] = hw;  dy[2] = hh
    dx[3] = -hw; dy[3] = hh
    cdef int k
    for k in range(4):
        xs[k] = cx + c * dx[k] - s * dy[k]
        ys[k] = cy + s * dx[k] + c * dy[k]


cdef inline double _area(double* xs, double* ys, int n) noexcept nogil:
    if n < 3:
        return 0.0
    cdef double acc = 0.0
    cdef int i, j
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        acc += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * acc


cdef int _clip(double* sx, double* sy, int ns, double* cx, double* cy, int nc,
               double* ox, double* oy) noexcept nogil:
    """Sutherland-Hodgman; result left in (ox, oy), returns vertex count."""
    cdef double bufx[MAXV]
    cdef double bufy[MAXV]
    cdef int i, j, m, n_out, k
    cdef double ax, ay, bx, by, ex, ey, px, py, qx, qy, dp, dq, t
    cdef bint p_in, q_in
    n_out = ns
    for k in range(ns):
        ox[k] = sx[k]
        oy[k] = sy[k]
    for i in range(nc):
        if n_out == 0:
            break
        ax = cx[i]; ay = cy[i]
        if i + 1 == nc:
            bx = cx[0]; by = cy[0]
        else:
            bx = cx[i + 1]; by = cy[i + 1]
        ex = bx - ax
        ey = by - ay
        m = n_out
        for k in range(m):
            bufx[k] = ox[k]
            bufy[k] = oy[k]
        n_out = 0
        for j in range(m):
            if j == 0:
                px = bufx[m - 1]; py = bufy[m - 1]
            else:
                px = bufx[j - 1]; py = bufy[j - 1]
            qx = bufx[j]; qy = bufy[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            p_in = dp >= -EPS
            q_in = dq >= -EPS
            if q_in:
                if not p_in and n_out < MAXV:
                    t = dp / (dp - dq)
                    ox[n_out] = px + t * (qx - px)
                    oy[n_out] = py + t * (qy - py)
                    n_out += 1
                if n_out < MAXV:
                    ox[n_out] = qx
                    oy[n_out] = qy
                    n_out += 1
            elif p_in and n_out < MAXV:
                t = dp / (dp - dq)
                ox[n_out] = px + t * (qx - px)
                oy[n_out] = py + t * (qy - py)
                n_out += 1
    return n_out


cdef double _iou(const double* a, const double* b) noexcept nogil:
    cdef double area_a = a[2] * a[3]
    cdef double area_b = b[2] * b[3]
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    cdef double pax[4]
    cdef double pay[4]
    cdef double pbx[4]
    cdef double pby[4]
    cdef double ox[MAXV]
    cdef double oy[MAXV]
    _corners(a[0], a[1], a[2], a[3], a[4], pax, pay)
    _corners(b[0], b[1], b[2], b[3], b[4], pbx, pby)
    cdef int n = _clip(pax, pay, 4, pbx, pby, 4, ox, oy)
    cdef double inter = fabs(_area(ox, oy, n))
    cdef double union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    cdef double r = inter / union
    if r < 0.0:
        return 0.0
    if r > 1.0:
        return 1.0
    return r


def rotated_iou(a, b):
    cdef double av[5]
    cdef double bv[5]
    cdef int k
    for k in range(5):
        av[k] = a[k]
        bv[k] = b[k]
    return _iou(av, bv)


def rotated_iou_matrix(boxes_a, boxes_b):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] A = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] B = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t m = B.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] av = A
    cdef double[:, ::1] bv = B
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                ov[i, j] = _iou(&av[i, 0], &bv[j, 0])
    return out
