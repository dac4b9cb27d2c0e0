# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: windowed MMD^2 U-statistic and the prototype head.

Mirrors ``_kernels_py`` function for function.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


cdef inline double _sqdist(double[:, ::1] A, Py_ssize_t i,
                           double[:, ::1] C, Py_ssize_t j) nogil:
    cdef Py_ssize_t k
    cdef double s = 0.0, t
    for k in range(A.shape[1]):
        t = A[i, k] - C[j, k]
        s += t * t
    return s


def mmd2_ustat(U, V, double sigma):
    cdef double[:, ::1] u = np.ascontiguousarray(U, dtype=np.float64)
    cdef double[:, ::1] v = np.ascontiguousarray(V, dtype=np.float64)
    cdef Py_ssize_t B = u.shape[0]
    cdef Py_ssize_t i, j
    cdef double gamma = 1.0 / (2.0 * sigma * sigma)
    cdef double s_uu = 0.0, s_vv = 0.0, s_uv = 0.0
    with nogil:
        for i in range(B):
            for j in range(i + 1, B):
                s_uu += exp(-gamma * _sqdist(u, i, u, j))
                s_vv += exp(-gamma * _sqdist(v, i, v, j))
            for j in range(B):
                if j != i:
                    s_uv += exp(-gamma * _sqdist(u, i, v, j))
    return (2.0 * s_uu + 2.0 * s_vv - 2.0 * s_uv) / (B * (B - 1))


def pnet_head(S, ys, Q, yq, int n_way):
    cdef double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef cnp.int64_t[::1] lab_s = np.ascontiguousarray(ys, dtype=np.int64)
    cdef cnp.int64_t[::1] lab_q = np.ascontiguousarray(yq, dtype=np.int64)
    cdef Py_ssize_t ns = s.shape[0], nq = q.shape[0], e = s.shape[1]
    cdef Py_ssize_t i, j, k, c

    protos_a = np.zeros((n_way, e))
    counts_a = np.zeros(n_way)
    dS_a = np.zeros((ns, e))
    dQ_a = np.zeros((nq, e))
    proxy_a = np.zeros(nq)
    dC_a = np.zeros((n_way, e))
    p_a = np.zeros(n_way)
    dist_a = np.zeros(n_way)
    gc_a = np.zeros((n_way, e))
    cdef double[:, ::1] protos = protos_a
    cdef double[::1] counts = counts_a
    cdef double[:, ::1] dS = dS_a
    cdef double[:, ::1] dQ = dQ_a
    cdef double[::1] proxy = proxy_a
    cdef double[:, ::1] dC = dC_a
    cdef double[::1] p = p_a
    cdef double[::1] dist = dist_a
    cdef double[:, ::1] gc = gc_a
    cdef double loss = 0.0, mx, z, t, gq, nrm, ak, inv_nq = 1.0 / nq

    with nogil:
        for i in range(ns):
            k = lab_s[i]
            counts[k] += 1.0
            for c in range(e):
                protos[k, c] += s[i, c]
        for k in range(n_way):
            for c in range(e):
                protos[k, c] /= counts[k]

        for j in range(nq):
            mx = -1e300
            for k in range(n_way):
                dist[k] = _sqdist(q, j, protos, k)
                if -dist[k] > mx:
                    mx = -dist[k]
            z = 0.0
            for k in range(n_way):
                p[k] = exp(-dist[k] - mx)
                z += p[k]
            for k in range(n_way):
                p[k] /= z
            loss += dist[lab_q[j]] + mx + log(z)
            p[lab_q[j]] -= 1.0

            nrm = 0.0
            for c in range(e):
                gq = 0.0
                for k in range(n_way):
                    gq += p[k] * protos[k, c]
                gq *= 2.0
                dQ[j, c] = gq * inv_nq
                nrm += gq * gq
            for k in range(n_way):
                ak = 2.0 * p[k]
                t = 0.0
                for c in range(e):
                    gc[k, c] = ak * (q[j, c] - protos[k, c])
                    t += gc[k, c] * gc[k, c]
                    dC[k, c] += gc[k, c] * inv_nq
                nrm += t / counts[k]
            proxy[j] = sqrt(nrm)

        for i in range(ns):
            k = lab_s[i]
            for c in range(e):
                dS[i, c] = dC[k, c] / counts[k]

    return loss * inv_nq, dS_a, dQ_a, proxy_a


def pnet_predict(S, ys, Q, int n_way):
    cdef double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef cnp.int64_t[::1] lab_s = np.ascontiguousarray(ys, dtype=np.int64)
    cdef Py_ssize_t ns = s.shape[0], nq = q.shape[0], e = s.shape[1]
    cdef Py_ssize_t i, j, k, c, best
    protos_a = np.zeros((n_way, e))
    counts_a = np.zeros(n_way)
    out_a = np.zeros(nq, dtype=np.int64)
    cdef double[:, ::1] protos = protos_a
    cdef double[::1] counts = counts_a
    cdef cnp.int64_t[::1] out = out_a
    cdef double d, dbest
    with nogil:
        for i in range(ns):
            k = lab_s[i]
            counts[k] += 1.0
            for c in range(e):
                protos[k, c] += s[i, c]
        for k in range(n_way):
            for c in range(e):
                protos[k, c] /= counts[k]
        for j in range(nq):
            best = 0
            dbest = 1e300
            for k in range(n_way):
                d = _sqdist(q, j, protos, k)
                if d < dbest:
                    dbest = d
                    best = k
            out[j] = best
    return out_a
