# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the deterministic and trajectory engines.

Every function here has a numpy twin with the same signature in
:mod:`qfeedsim._fallback`. All loops release the GIL so the engines can
fan chunks out over Python threads.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil

cnp.import_array()

ctypedef double complex cplx


cdef inline void _matmul(const cplx* a, const cplx* b, cplx* out, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef cplx acc
    for i in range(d):
        for j in range(d):
            acc = 0
            for k in range(d):
                acc = acc + a[i * d + k] * b[k * d + j]
            out[i * d + j] = acc


cdef inline void _sandwich(const cplx* k, const cplx* rho, cplx* tmp, cplx* out,
                           Py_ssize_t d, bint accumulate) noexcept nogil:
    # out (+)= k @ rho @ k^H
    cdef Py_ssize_t i, j, c
    cdef cplx acc
    _matmul(k, rho, tmp, d)
    for i in range(d):
        for j in range(d):
            acc = 0
            for c in range(d):
                acc = acc + tmp[i * d + c] * k[j * d + c].conjugate()
            if accumulate:
                out[i * d + j] = out[i * d + j] + acc
            else:
                out[i * d + j] = acc


def sandwich_all(const cplx[:, :, ::1] kraus, const cplx[:, :, ::1] states):
    """Return ``out[i, x] = K_x rho_i K_x^H`` with shape (N, X, d, d)."""
    cdef Py_ssize_t nx = kraus.shape[0], d = kraus.shape[1], n = states.shape[0]
    cdef Py_ssize_t i, x
    out = np.empty((n, nx, d, d), dtype=np.complex128)
    cdef cplx[:, :, :, ::1] o = out
    cdef cplx[::1] tmp = np.empty(d * d, dtype=np.complex128)
    if n == 0:
        return out
    with nogil:
        for i in range(n):
            for x in range(nx):
                _sandwich(&kraus[x, 0, 0], &states[i, 0, 0], &tmp[0], &o[i, x, 0, 0], d, False)
    return out


def select_sandwich(const cplx[:, :, ::1] kraus, const cplx[:, :, ::1] states,
                    const cnp.int64_t[::1] choice):
    """Return ``out[b] = K_{choice[b]} rho_b K_{choice[b]}^H``."""
    cdef Py_ssize_t d = kraus.shape[1], n = states.shape[0], b
    out = np.empty((n, d, d), dtype=np.complex128)
    cdef cplx[:, :, ::1] o = out
    cdef cplx[::1] tmp = np.empty(d * d, dtype=np.complex128)
    if n == 0:
        return out
    with nogil:
        for b in range(n):
            _sandwich(&kraus[choice[b], 0, 0], &states[b, 0, 0], &tmp[0], &o[b, 0, 0], d, False)
    return out


def apply_kraus(const cplx[:, :, :, ::1] ops, const cplx[:, :, ::1] states):
    """Return ``out[j] = sum_r A_{j,r} rho_j A_{j,r}^H`` for per-state Kraus lists."""
    cdef Py_ssize_t m = states.shape[0], nr = ops.shape[1], d = ops.shape[2]
    cdef Py_ssize_t j, r, i
    out = np.zeros((m, d, d), dtype=np.complex128)
    cdef cplx[:, :, ::1] o = out
    cdef cplx[::1] tmp = np.empty(d * d, dtype=np.complex128)
    if m == 0:
        return out
    with nogil:
        for j in range(m):
            for r in range(nr):
                _sandwich(&ops[j, r, 0, 0], &states[j, 0, 0], &tmp[0], &o[j, 0, 0], d, True)
    return out


def scatter_add(const cplx[:, :, ::1] contribs, const cnp.int64_t[::1] slots, Py_ssize_t m):
    """Sum ``contribs[c]`` into ``out[slots[c]]`` strictly in input order."""
    cdef Py_ssize_t n = contribs.shape[0], d = contribs.shape[1], c, i, j, s
    out = np.zeros((m, d, d), dtype=np.complex128)
    cdef cplx[:, :, ::1] o = out
    with nogil:
        for c in range(n):
            s = slots[c]
            for i in range(d):
                for j in range(d):
                    o[s, i, j] = o[s, i, j] + contribs[c, i, j]
    return out


def born_batch(const cplx[:, :, ::1] effects, const cplx[:, :, ::1] states):
    """Return ``p[b, x] = Re tr(E_x rho_b)``."""
    cdef Py_ssize_t nx = effects.shape[0], d = effects.shape[1], n = states.shape[0]
    cdef Py_ssize_t b, x, i, j
    cdef double acc
    out = np.empty((n, nx), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for b in range(n):
            for x in range(nx):
                acc = 0.0
                for i in range(d):
                    for j in range(d):
                        acc = acc + (effects[x, i, j] * states[b, j, i]).real
                o[b, x] = acc
    return out


def traces(const cplx[:, :, ::1] states):
    """Real part of the trace of each matrix in a stack."""
    cdef Py_ssize_t n = states.shape[0], d = states.shape[1], b, i
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for b in range(n):
            acc = 0.0
            for i in range(d):
                acc = acc + states[b, i, i].real
            o[b] = acc
    return out


def categorical(const double[:, ::1] probs, const double[::1] u):
    """Inverse-CDF draw per row; zero-probability columns are never selected."""
    cdef Py_ssize_t n = probs.shape[0], nx = probs.shape[1], b, x, last
    cdef double total, target, cum
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        for b in range(n):
            total = 0.0
            last = -1
            for x in range(nx):
                if probs[b, x] > 0.0:
                    total = total + probs[b, x]
                    last = x
            target = u[b] * total
            cum = 0.0
            o[b] = last
            for x in range(nx):
                if probs[b, x] > 0.0:
                    cum = cum + probs[b, x]
                    if cum > target:
                        o[b] = x
                        break
    return out


def project(const double[:, ::1] raw, const double[::1] mins, const double[::1] steps,
            const cnp.int64_t[::1] counts, double tol):
    """Clamp-and-round points onto a uniform grid; ties go toward -inf.

    Returns ``(index, clipped)`` where ``clipped[c]`` flags points that left
    the lattice box in any component.
    """
    cdef Py_ssize_t n = raw.shape[0], dim = raw.shape[1], c, k
    cdef double v, top, q
    cdef cnp.int64_t i
    idx = np.empty((n, dim), dtype=np.int64)
    clipped = np.zeros(n, dtype=np.bool_)
    cdef cnp.int64_t[:, ::1] o = idx
    cdef cnp.npy_bool[::1] cl = clipped
    with nogil:
        for c in range(n):
            for k in range(dim):
                v = raw[c, k]
                top = mins[k] + (counts[k] - 1) * steps[k]
                if v < mins[k] - tol * steps[k] or v > top + tol * steps[k]:
                    cl[c] = 1
                if v < mins[k]:
                    v = mins[k]
                elif v > top:
                    v = top
                q = (v - mins[k]) / steps[k]
                i = <cnp.int64_t>ceil(q - 0.5)
                if i < 0:
                    i = 0
                elif i > counts[k] - 1:
                    i = counts[k] - 1
                o[c, k] = i
    return idx, clipped
