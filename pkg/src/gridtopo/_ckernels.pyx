# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, asin, sqrt, log, floor, isnan, NAN, M_PI

cnp.import_array()

EARTH_RADIUS_M = 6371008.8


def haversine_matrix(lat1, lon1, lat2, lon2, double radius=EARTH_RADIUS_M):
    cdef const double[::1] a1 = np.ascontiguousarray(lat1, dtype=np.float64)
    cdef const double[::1] o1 = np.ascontiguousarray(lon1, dtype=np.float64)
    cdef const double[::1] a2 = np.ascontiguousarray(lat2, dtype=np.float64)
    cdef const double[::1] o2 = np.ascontiguousarray(lon2, dtype=np.float64)
    cdef Py_ssize_t n = a1.shape[0], m = a2.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] d = out
    cdef double deg = M_PI / 180.0
    cdef double p1, p2, sdp, sdl, a, c1
    for i in range(n):
        p1 = a1[i] * deg
        c1 = cos(p1)
        for j in range(m):
            p2 = a2[j] * deg
            sdp = sin((p2 - p1) * 0.5)
            sdl = sin((o2[j] * deg - o1[i] * deg) * 0.5)
            a = sdp * sdp + c1 * cos(p2) * (sdl * sdl)
            if a > 1.0:
                a = 1.0
            d[i, j] = 2.0 * radius * asin(sqrt(a))
    return out


cdef double _pearson(const double[::1] x, const double[::1] y, Py_ssize_t min_overlap) noexcept nogil:
    cdef Py_ssize_t t, T = x.shape[0], n = 0
    cdef double sx = 0.0, sy = 0.0, mx, my, dx, dy, sxx = 0.0, syy = 0.0, sxy = 0.0, r
    for t in range(T):
        if not (isnan(x[t]) or isnan(y[t])):
            n += 1
            sx += x[t]
            sy += y[t]
    if n < min_overlap or n < 2:
        return NAN
    mx = sx / n
    my = sy / n
    for t in range(T):
        if not (isnan(x[t]) or isnan(y[t])):
            dx = x[t] - mx
            dy = y[t] - my
            sxx += dx * dx
            syy += dy * dy
            sxy += dx * dy
    if sxx == 0.0 or syy == 0.0:
        return NAN
    r = sxy / sqrt(sxx * syy)
    if r > 1.0:
        r = 1.0
    elif r < -1.0:
        r = -1.0
    return r


def pearson_pair(x, y, Py_ssize_t min_overlap):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    return _pearson(xv, yv, min_overlap)


def pearson_matrix(X, Py_ssize_t min_overlap):
    cdef const double[:, ::1] A = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], i, j
    out = np.full((n, n), np.nan)
    cdef double[:, ::1] R = out
    cdef double r
    with nogil:
        for i in range(n):
            for j in range(i, n):
                r = _pearson(A[i], A[j], min_overlap)
                R[i, j] = r
                R[j, i] = r
    return out


cdef double _entropy_from_counts(long[::1] counts, Py_ssize_t n):
    cdef long[::1] cc = np.zeros(n + 1, dtype=np.int_)
    cdef Py_ssize_t b, v
    cdef double s = 0.0
    for b in range(counts.shape[0]):
        if counts[b] > 1:
            cc[counts[b]] += 1
    for v in range(2, n + 1):
        if cc[v]:
            s += cc[v] * (v * log(<double>v))
    return log(<double>n) - s / n


cdef inline Py_ssize_t _bin(double x, double lo, double hi, Py_ssize_t bins) noexcept nogil:
    cdef Py_ssize_t k = <Py_ssize_t>floor(((x - lo) / (hi - lo)) * bins)
    if k >= bins:
        k = bins - 1
    return k


def hist_entropy(x, Py_ssize_t bins):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i
    cdef double lo = xv[0], hi = xv[0]
    for i in range(n):
        if xv[i] < lo:
            lo = xv[i]
        if xv[i] > hi:
            hi = xv[i]
    if hi == lo:
        return 0.0
    cdef long[::1] c = np.zeros(bins, dtype=np.int_)
    for i in range(n):
        c[_bin(xv[i], lo, hi, bins)] += 1
    return _entropy_from_counts(c, n)


def hist_mi(x, y, Py_ssize_t bins):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i, ix, iy
    cdef double xlo = xv[0], xhi = xv[0], ylo = yv[0], yhi = yv[0]
    for i in range(n):
        if xv[i] < xlo:
            xlo = xv[i]
        if xv[i] > xhi:
            xhi = xv[i]
        if yv[i] < ylo:
            ylo = yv[i]
        if yv[i] > yhi:
            yhi = yv[i]
    if xhi == xlo or yhi == ylo:
        return 0.0, True
    cdef long[::1] cx = np.zeros(bins, dtype=np.int_)
    cdef long[::1] cy = np.zeros(bins, dtype=np.int_)
    cdef long[::1] cxy = np.zeros(bins * bins, dtype=np.int_)
    for i in range(n):
        ix = _bin(xv[i], xlo, xhi, bins)
        iy = _bin(yv[i], ylo, yhi, bins)
        cx[ix] += 1
        cy[iy] += 1
        cxy[ix * bins + iy] += 1
    cdef double hx = _entropy_from_counts(cx, n)
    cdef double hy = _entropy_from_counts(cy, n)
    cdef double hxy = _entropy_from_counts(cxy, n)
    cdef double mi = (hx + hy) - hxy
    if mi < 0.0:
        mi = 0.0
    return mi, False


def lloyd_assign(X, C):
    cdef const double[:, ::1] A = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] M = np.ascontiguousarray(C, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], d = A.shape[1], k = M.shape[0], i, j, t, best
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] L = labels
    cdef double[::1] D = dist
    cdef double s, diff, bestd
    with nogil:
        for i in range(n):
            best = 0
            bestd = 0.0
            for j in range(k):
                s = 0.0
                for t in range(d):
                    diff = A[i, t] - M[j, t]
                    s += diff * diff
                if j == 0 or s < bestd:
                    bestd = s
                    best = j
            L[i] = best
            D[i] = bestd
    return labels, dist
