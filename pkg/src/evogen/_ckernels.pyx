# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-comparison kernels for MSA trimming.

Token arrays are int8 with the gap encoded as ``gap_id``. Semantics match
``evogen._pykernels`` exactly; the two are cross-checked in the test suite.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def identity_to(const signed char[:, ::1] tokens, const signed char[::1] ref, int gap_id):
    cdef Py_ssize_t n = tokens.shape[0], L = tokens.shape[1], i, j
    cdef long matches
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    if L == 0:
        return out
    cdef signed char g = <signed char>gap_id
    cdef const signed char* row
    for i in range(n):
        row = &tokens[i, 0]
        matches = 0
        for j in range(L):
            # branchless so the compiler can vectorize
            matches += (row[j] == ref[j]) & (row[j] != g)
        o[i] = <double>matches / <double>L
    return out


def coverage_rows(const signed char[:, ::1] tokens, int gap_id):
    cdef Py_ssize_t n = tokens.shape[0], L = tokens.shape[1], i, j
    cdef long filled
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    if L == 0:
        return out
    cdef signed char g = <signed char>gap_id
    for i in range(n):
        filled = 0
        for j in range(L):
            filled += tokens[i, j] != g
        o[i] = <double>filled / <double>L
    return out


def hamming_to(const signed char[:, ::1] tokens, const signed char[::1] ref):
    cdef Py_ssize_t n = tokens.shape[0], L = tokens.shape[1], i, j
    cdef long d
    out = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for i in range(n):
        d = 0
        for j in range(L):
            d += tokens[i, j] != ref[j]
        o[i] = d
    return out


def greedy_admit(const signed char[:, ::1] tokens, const cnp.int64_t[::1] order,
                 Py_ssize_t n_max, double ident_max, int gap_id):
    """Walk candidates in the given order; admit each whose identity to every pooled row is <= ident_max.

    Row 0 seeds the pool. Returns admitted row indices in admission order.
    """
    cdef Py_ssize_t L = tokens.shape[1], m = order.shape[0]
    cdef Py_ssize_t k, p, j, size = 1, cand, member
    cdef long matches
    cdef bint ok
    cdef signed char g = <signed char>gap_id
    cdef const signed char* a = NULL
    cdef const signed char* b
    pool = np.zeros(max(n_max, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] pv = pool
    pv[0] = 0
    for k in range(m):
        if size >= n_max:
            break
        cand = order[k]
        ok = True
        if L > 0:
            a = &tokens[cand, 0]
        for p in range(size):
            if L == 0:
                break
            member = pv[p]
            b = &tokens[member, 0]
            matches = 0
            for j in range(L):
                matches += (a[j] == b[j]) & (a[j] != g)
            if L > 0 and <double>matches / <double>L > ident_max:
                ok = False
                break
        if ok:
            pv[size] = cand
            size += 1
    return pool[:min(size, n_max)].copy()
