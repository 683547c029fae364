# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM recurrence. Same contract as ``_scan_py``."""
import numpy as np
from libc.math cimport exp


cdef inline double _sig(double z) nogil:
    return 1.0 / (1.0 + exp(-z))


cdef inline double _tanh(double z) nogil:
    # exp-based tanh is several times cheaper than libm tanh; abs error ~1e-16
    if z > 20.0:
        return 1.0
    if z < -20.0:
        return -1.0
    return 2.0 / (1.0 + exp(-2.0 * z)) - 1.0


def lstm_scan_forward(const double[:, ::1] xproj, const double[:, ::1] wh):
    cdef Py_ssize_t T = xproj.shape[0], G = xproj.shape[1]
    cdef Py_ssize_t h = G // 4
    cdef Py_ssize_t t, j, k
    hs_a = np.zeros((T, h))
    cs_a = np.zeros((T, h))
    acts_a = np.zeros((T, G))
    z_a = np.zeros(G)
    cdef double[:, ::1] wht = np.ascontiguousarray(np.asarray(wh).T)
    cdef double[:, ::1] hs = hs_a
    cdef double[:, ::1] cs = cs_a
    cdef double[:, ::1] acts = acts_a
    cdef double[::1] z = z_a
    cdef double hk, c
    with nogil:
        for t in range(T):
            for j in range(G):
                z[j] = xproj[t, j]
            if t > 0:
                # k outer / j inner keeps each z[j] a separate chain, so it vectorizes
                for k in range(h):
                    hk = hs[t - 1, k]
                    for j in range(G):
                        z[j] = z[j] + wht[k, j] * hk
            for j in range(3 * h):
                acts[t, j] = _sig(z[j])
            for j in range(3 * h, G):
                acts[t, j] = _tanh(z[j])
            for j in range(h):
                if t > 0:
                    c = acts[t, h + j] * cs[t - 1, j]
                else:
                    c = 0.0
                c = c + acts[t, j] * acts[t, 3 * h + j]
                cs[t, j] = c
                hs[t, j] = acts[t, 2 * h + j] * _tanh(c)
    return hs_a, cs_a, acts_a


def lstm_scan_backward(const double[:, ::1] dhs, const double[:, ::1] acts,
                       const double[:, ::1] cs, const double[:, ::1] wh):
    cdef Py_ssize_t T = acts.shape[0], G = acts.shape[1]
    cdef Py_ssize_t h = G // 4
    cdef Py_ssize_t t, j, k
    dz_a = np.zeros((T, G))
    cdef double[:, ::1] dz = dz_a
    dh_next_a = np.zeros(h)
    dc_next_a = np.zeros(h)
    cdef double[::1] dh_next = dh_next_a
    cdef double[::1] dc_next = dc_next_a
    cdef double i, f, o, g, tc, c_prev, dh, dc, d
    with nogil:
        for t in range(T - 1, -1, -1):
            for j in range(h):
                i = acts[t, j]
                f = acts[t, h + j]
                o = acts[t, 2 * h + j]
                g = acts[t, 3 * h + j]
                tc = _tanh(cs[t, j])
                if t > 0:
                    c_prev = cs[t - 1, j]
                else:
                    c_prev = 0.0
                dh = dhs[t, j] + dh_next[j]
                dc = dc_next[j] + dh * o * (1.0 - tc * tc)
                dz[t, j] = dc * g * i * (1.0 - i)
                dz[t, h + j] = dc * c_prev * f * (1.0 - f)
                dz[t, 2 * h + j] = dh * tc * o * (1.0 - o)
                dz[t, 3 * h + j] = dc * i * (1.0 - g * g)
                dc_next[j] = dc * f
            for k in range(h):
                dh_next[k] = 0.0
            for j in range(G):
                d = dz[t, j]
                for k in range(h):
                    dh_next[k] = dh_next[k] + wh[j, k] * d
    return dz_a
