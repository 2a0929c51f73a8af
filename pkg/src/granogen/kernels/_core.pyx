# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contracts as ``_pure``."""
import numpy as np

from libc.math cimport INFINITY
from libc.stdlib cimport free, malloc, realloc


def edt_sq_lines(double[:, ::1] f):
    cdef Py_ssize_t nlines = f.shape[0]
    cdef Py_ssize_t n = f.shape[1]
    cdef Py_ssize_t line, q, p, k
    cdef double s, fq
    cdef double[::1] row = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] v = np.empty(max(n, 1), dtype=np.intp)
    cdef double[::1] z = np.empty(n + 1, dtype=np.float64)
    with nogil:
        for line in range(nlines):
            for q in range(n):
                row[q] = f[line, q]
            k = -1
            for q in range(n):
                fq = row[q]
                if fq == INFINITY:
                    continue
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -INFINITY
                    z[1] = INFINITY
                    continue
                while True:
                    p = v[k]
                    s = ((fq + q * q) - (row[p] + p * p)) / (2.0 * (q - p))
                    if s <= z[k]:
                        k -= 1
                        if k < 0:
                            break
                    else:
                        break
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -INFINITY
                    z[1] = INFINITY
                else:
                    k += 1
                    v[k] = q
                    z[k] = s
                    z[k + 1] = INFINITY
            if k < 0:
                continue
            k = 0
            for q in range(n):
                while z[k + 1] < q:
                    k += 1
                p = v[k]
                f[line, q] = (q - p) * (q - p) + row[p]


cdef struct Entry:
    double prio
    long long age
    Py_ssize_t idx


cdef inline bint _less(Entry* a, Entry* b) nogil:
    if a.prio < b.prio:
        return True
    if a.prio > b.prio:
        return False
    return a.age < b.age


cdef struct Heap:
    Entry* data
    Py_ssize_t size
    Py_ssize_t cap


cdef int _push(Heap* h, double prio, long long age, Py_ssize_t idx) nogil:
    cdef Entry* grown
    cdef Py_ssize_t i, parent
    cdef Entry tmp
    if h.size == h.cap:
        grown = <Entry*> realloc(h.data, 2 * h.cap * sizeof(Entry))
        if grown == NULL:
            return -1
        h.data = grown
        h.cap *= 2
    i = h.size
    h.size += 1
    h.data[i].prio = prio
    h.data[i].age = age
    h.data[i].idx = idx
    while i > 0:
        parent = (i - 1) // 2
        if _less(&h.data[i], &h.data[parent]):
            tmp = h.data[i]
            h.data[i] = h.data[parent]
            h.data[parent] = tmp
            i = parent
        else:
            break
    return 0


cdef Entry _pop(Heap* h) nogil:
    cdef Entry top = h.data[0]
    cdef Entry tmp
    cdef Py_ssize_t i = 0, left, right, best
    h.size -= 1
    h.data[0] = h.data[h.size]
    while True:
        left = 2 * i + 1
        right = left + 1
        best = i
        if left < h.size and _less(&h.data[left], &h.data[best]):
            best = left
        if right < h.size and _less(&h.data[right], &h.data[best]):
            best = right
        if best == i:
            break
        tmp = h.data[i]
        h.data[i] = h.data[best]
        h.data[best] = tmp
        i = best
    return top


def flood(double[::1] priority, int[::1] labels, unsigned char[::1] mask, shape):
    cdef Py_ssize_t nz = shape[0], ny = shape[1], nx = shape[2]
    cdef Py_ssize_t sxy = ny * nx
    cdef Py_ssize_t n = priority.shape[0]
    cdef Py_ssize_t i, idx, z, y, x, rem, j, nb
    cdef long long age = 0
    cdef int lab
    cdef Entry e
    cdef Py_ssize_t nbs[6]
    cdef bint oks[6]
    cdef Heap h
    h.cap = 1024
    h.size = 0
    h.data = <Entry*> malloc(h.cap * sizeof(Entry))
    if h.data == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            if labels[i] != 0:
                if _push(&h, priority[i], age, i) != 0:
                    raise MemoryError()
                age += 1
        while h.size > 0:
            e = _pop(&h)
            idx = e.idx
            lab = labels[idx]
            z = idx // sxy
            rem = idx - z * sxy
            y = rem // nx
            x = rem - y * nx
            nbs[0] = idx - sxy
            oks[0] = z > 0
            nbs[1] = idx + sxy
            oks[1] = z < nz - 1
            nbs[2] = idx - nx
            oks[2] = y > 0
            nbs[3] = idx + nx
            oks[3] = y < ny - 1
            nbs[4] = idx - 1
            oks[4] = x > 0
            nbs[5] = idx + 1
            oks[5] = x < nx - 1
            for j in range(6):
                if oks[j]:
                    nb = nbs[j]
                    if mask[nb] and labels[nb] == 0:
                        labels[nb] = lab
                        if _push(&h, priority[nb], age, nb) != 0:
                            raise MemoryError()
                        age += 1
    finally:
        free(h.data)
