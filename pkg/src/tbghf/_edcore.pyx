# distutils: language = c++
"""Compiled COO assembly of second-quantized operators over occupation bitstrings.

Each term is a product of four fermion operators written left to right as
``c†_{o0} c†_{o1} c_{o2} c_{o3}`` and applied right to left; a negative
orbital index skips that slot, so one-body terms ``c†_p c_q`` are stored as
``(p, -1, q, -1)``.  Orbital ``j`` is bit ``j`` of the state, and the sign of
``c_j`` or ``c†_j`` is the parity of the occupied orbitals below ``j``.
"""
from libcpp.vector cimport vector

import numpy as np

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


cdef inline Py_ssize_t _find(const unsigned long long[:] states, unsigned long long y) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = states.shape[0] - 1, mid
    while lo <= hi:
        mid = (lo + hi) >> 1
        if states[mid] == y:
            return mid
        if states[mid] < y:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


def assemble_coo(const unsigned long long[:] states, const long long[:, :] ops, const double complex[:] coef):
    """Return ``(rows, cols, vals)`` of ``sum_t coef[t] * term_t`` on the sorted basis ``states``."""
    cdef Py_ssize_t nstates = states.shape[0], nterms = ops.shape[0]
    cdef Py_ssize_t t, i, j
    cdef int slot, parity
    cdef long long orb
    cdef unsigned long long x, y, bit
    cdef bint ok
    cdef vector[long long] rows, cols
    cdef vector[double complex] vals
    with nogil:
        for t in range(nterms):
            for i in range(nstates):
                x = states[i]
                y = x
                parity = 0
                ok = True
                for slot in range(3, -1, -1):
                    orb = ops[t, slot]
                    if orb < 0:
                        continue
                    bit = (<unsigned long long> 1) << orb
                    if slot >= 2:
                        if not (y & bit):
                            ok = False
                            break
                    elif y & bit:
                        ok = False
                        break
                    parity += __builtin_popcountll(y & (bit - 1))
                    y ^= bit
                if not ok:
                    continue
                j = _find(states, y)
                if j < 0:
                    continue
                rows.push_back(j)
                cols.push_back(i)
                if parity & 1:
                    vals.push_back(-coef[t])
                else:
                    vals.push_back(coef[t])
    n = rows.size()
    out_r = np.empty(n, dtype=np.int64)
    out_c = np.empty(n, dtype=np.int64)
    out_v = np.empty(n, dtype=np.complex128)
    cdef long long[:] vr = out_r
    cdef long long[:] vc = out_c
    cdef double complex[:] vv = out_v
    for i in range(<Py_ssize_t> n):
        vr[i] = rows[i]
        vc[i] = cols[i]
        vv[i] = vals[i]
    return out_r, out_c, out_v
