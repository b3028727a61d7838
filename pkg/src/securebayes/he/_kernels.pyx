# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled modular arithmetic kernels (same API as ``_kernels_py``)."""
import numpy as np
cimport numpy as cnp

ctypedef unsigned long long u64

cdef extern from *:
    ctypedef unsigned long long u128 "unsigned __int128"

BACKEND = "cython"


cdef inline u64 _mulmod(u64 a, u64 b, u64 q) nogil:
    return <u64>((<u128>a * b) % q)


def mulmod_rows(cnp.ndarray a_in, cnp.ndarray b_in, moduli):
    cdef u64[:, ::1] a = np.ascontiguousarray(a_in, dtype=np.uint64)
    cdef u64[:, ::1] b = np.ascontiguousarray(b_in, dtype=np.uint64)
    cdef u64[::1] qs = np.ascontiguousarray(moduli, dtype=np.uint64)
    cdef Py_ssize_t limbs = a.shape[0], n = a.shape[1], i, j
    out = np.empty((limbs, n), dtype=np.uint64)
    cdef u64[:, ::1] o = out
    cdef u64 q
    with nogil:
        for i in range(limbs):
            q = qs[i]
            for j in range(n):
                o[i, j] = _mulmod(a[i, j], b[i, j], q)
    return out


def ntt_forward_rows(cnp.ndarray a_in, moduli, cnp.ndarray psi_rev_in):
    cdef u64[:, ::1] a = a_in
    cdef u64[:, ::1] psi = psi_rev_in
    cdef u64[::1] qs = np.ascontiguousarray(moduli, dtype=np.uint64)
    cdef Py_ssize_t limbs = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t row, m, t, i, j, j1
    cdef u64 q, w, u, v
    with nogil:
        for row in range(limbs):
            q = qs[row]
            t = n
            m = 1
            while m < n:
                t = t >> 1
                for i in range(m):
                    j1 = 2 * i * t
                    w = psi[row, m + i]
                    for j in range(j1, j1 + t):
                        u = a[row, j]
                        v = _mulmod(a[row, j + t], w, q)
                        a[row, j] = u + v - q if u + v >= q else u + v
                        a[row, j + t] = u - v if u >= v else u + q - v
                m = m << 1
    return a_in


def ntt_inverse_rows(cnp.ndarray a_in, moduli, cnp.ndarray psi_inv_rev_in, n_inv):
    cdef u64[:, ::1] a = a_in
    cdef u64[:, ::1] psi = psi_inv_rev_in
    cdef u64[::1] qs = np.ascontiguousarray(moduli, dtype=np.uint64)
    cdef u64[::1] ninv = np.ascontiguousarray(n_inv, dtype=np.uint64)
    cdef Py_ssize_t limbs = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t row, m, t, h, i, j, j1
    cdef u64 q, w, u, v
    with nogil:
        for row in range(limbs):
            q = qs[row]
            t = 1
            m = n
            while m > 1:
                h = m >> 1
                j1 = 0
                for i in range(h):
                    w = psi[row, h + i]
                    for j in range(j1, j1 + t):
                        u = a[row, j]
                        v = a[row, j + t]
                        a[row, j] = u + v - q if u + v >= q else u + v
                        a[row, j + t] = _mulmod(u - v if u >= v else u + q - v, w, q)
                    j1 = j1 + 2 * t
                t = t << 1
                m = h
            for j in range(n):
                a[row, j] = _mulmod(a[row, j], ninv[row], q)
    return a_in
