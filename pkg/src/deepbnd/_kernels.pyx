# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled element kernels.

Mirrors :mod:`deepbnd._kernels_py` function for function; see there for the
argument conventions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


def element_matrices(const double[:, ::1] nodes, const long[:, ::1] cells,
                     const double[:, :, ::1] dshape, const double[::1] qweights,
                     const double[:, :, :, ::1] D):
    cdef Py_ssize_t ncell = cells.shape[0]
    cdef Py_ssize_t nloc = cells.shape[1]
    cdef Py_ssize_t nq = qweights.shape[0]
    cdef Py_ssize_t ndof = 2 * nloc
    Ke_arr = np.zeros((ncell, ndof, ndof))
    Fe_arr = np.zeros((ncell, ndof, 3))
    Se_arr = np.zeros((ncell, 3, 3))
    detj_arr = np.zeros(ncell)
    cdef double[:, :, ::1] Ke = Ke_arr
    cdef double[:, :, ::1] Fe = Fe_arr
    cdef double[:, :, ::1] Se = Se_arr
    cdef double[::1] detj = detj_arr
    cdef double[:, ::1] B = np.zeros((3, ndof))
    cdef double[:, ::1] DB = np.zeros((3, ndof))
    cdef Py_ssize_t e, q, a, i, j, k
    cdef double j00, j01, j10, j11, det, i00, i01, i10, i11, gx, gy, w, acc
    cdef long n0, n1, n2
    for e in range(ncell):
        n0 = cells[e, 0]
        n1 = cells[e, 1]
        n2 = cells[e, 2]
        j00 = nodes[n1, 0] - nodes[n0, 0]
        j01 = nodes[n2, 0] - nodes[n0, 0]
        j10 = nodes[n1, 1] - nodes[n0, 1]
        j11 = nodes[n2, 1] - nodes[n0, 1]
        det = j00 * j11 - j01 * j10
        detj[e] = det
        if det <= 0.0:
            continue
        i00 = j11 / det
        i01 = -j01 / det
        i10 = -j10 / det
        i11 = j00 / det
        for q in range(nq):
            w = qweights[q] * det
            for a in range(nloc):
                gx = i00 * dshape[q, a, 0] + i10 * dshape[q, a, 1]
                gy = i01 * dshape[q, a, 0] + i11 * dshape[q, a, 1]
                B[0, 2 * a] = gx
                B[1, 2 * a] = 0.0
                B[2, 2 * a] = gy
                B[0, 2 * a + 1] = 0.0
                B[1, 2 * a + 1] = gy
                B[2, 2 * a + 1] = gx
            for i in range(3):
                for j in range(ndof):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + D[e, q, i, k] * B[k, j]
                    DB[i, j] = acc
            for i in range(ndof):
                for j in range(ndof):
                    acc = 0.0
                    for k in range(3):
                        acc = acc + B[k, i] * DB[k, j]
                    Ke[e, i, j] += w * acc
                for k in range(3):
                    # D symmetric: (B^T D)[i, k] == DB[k, i]
                    Fe[e, i, k] += w * DB[k, i]
            for i in range(3):
                for k in range(3):
                    Se[e, i, k] += w * D[e, q, i, k]
    return Ke_arr, Fe_arr, Se_arr, detj_arr


def inclusion_indicator(const double[:, ::1] points, double x0, double y0,
                        double spacing, long nx, long ny,
                        const double[:, ::1] centres, const double[::1] radii,
                        double gamma):
    cdef Py_ssize_t m = points.shape[0]
    out_arr = np.ones(m)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t p
    cdef long ix, iy, b
    cdef double dx, dy
    for p in range(m):
        ix = <long> floor((points[p, 0] - x0) / spacing)
        iy = <long> floor((points[p, 1] - y0) / spacing)
        if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
            continue
        b = iy * nx + ix
        dx = points[p, 0] - centres[b, 0]
        dy = points[p, 1] - centres[b, 1]
        if dx * dx + dy * dy < radii[b] * radii[b]:
            out[p] = gamma
    return out_arr
