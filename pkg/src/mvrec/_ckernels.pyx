# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``mvrec._pykernels`` (same signatures)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3d(double[:, :, :, :, ::1] x, int kd, int kh, int kw, int sd, int sh, int sw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Do = (x.shape[2] - kd) // sd + 1
    cdef Py_ssize_t Ho = (x.shape[3] - kh) // sh + 1
    cdef Py_ssize_t Wo = (x.shape[4] - kw) // sw + 1
    cdef Py_ssize_t K = C * kd * kh * kw
    out = np.empty((B, Do, Ho, Wo, K))
    cdef double[:, :, :, :, ::1] o = out
    cdef Py_ssize_t b, i, j, l, c, a, p, q, col
    with nogil:
        for b in range(B):
            for i in range(Do):
                for j in range(Ho):
                    for l in range(Wo):
                        col = 0
                        for c in range(C):
                            for a in range(kd):
                                for p in range(kh):
                                    for q in range(kw):
                                        o[b, i, j, l, col] = x[b, c, i * sd + a, j * sh + p, l * sw + q]
                                        col += 1
    return out


def col2im3d(double[:, :, :, :, ::1] cols, int C, int D, int H, int W,
             int kd, int kh, int kw, int sd, int sh, int sw):
    cdef Py_ssize_t B = cols.shape[0], Do = cols.shape[1], Ho = cols.shape[2], Wo = cols.shape[3]
    out = np.zeros((B, C, D, H, W))
    cdef double[:, :, :, :, ::1] o = out
    cdef Py_ssize_t b, i, j, l, c, a, p, q, col
    with nogil:
        for b in range(B):
            for i in range(Do):
                for j in range(Ho):
                    for l in range(Wo):
                        col = 0
                        for c in range(C):
                            for a in range(kd):
                                for p in range(kh):
                                    for q in range(kw):
                                        o[b, c, i * sd + a, j * sh + p, l * sw + q] += cols[b, i, j, l, col]
                                        col += 1
    return out


def maxpool3d_forward(double[:, :, :, :, ::1] x, int wd, int wh, int ww, int sd, int sh, int sw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = (D - wd) // sd + 1, Ho = (H - wh) // sh + 1, Wo = (W - ww) // sw + 1
    out = np.empty((B, C, Do, Ho, Wo))
    idx = np.empty((B, C, Do, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, :, ::1] ix = idx
    cdef Py_ssize_t b, c, i, j, l, a, p, q, best_i
    cdef double best, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Do):
                    for j in range(Ho):
                        for l in range(Wo):
                            best = x[b, c, i * sd, j * sh, l * sw]
                            best_i = (i * sd) * H * W + (j * sh) * W + l * sw
                            for a in range(wd):
                                for p in range(wh):
                                    for q in range(ww):
                                        v = x[b, c, i * sd + a, j * sh + p, l * sw + q]
                                        if v > best:
                                            best = v
                                            best_i = (i * sd + a) * H * W + (j * sh + p) * W + l * sw + q
                            o[b, c, i, j, l] = best
                            ix[b, c, i, j, l] = best_i
    return out, idx


def maxpool3d_backward(double[:, :, :, :, ::1] grad_out, cnp.int64_t[:, :, :, :, ::1] argmax,
                       int D, int H, int W):
    cdef Py_ssize_t B = grad_out.shape[0], C = grad_out.shape[1]
    cdef Py_ssize_t Do = grad_out.shape[2], Ho = grad_out.shape[3], Wo = grad_out.shape[4]
    out = np.zeros((B, C, D * H * W))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, l
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Do):
                    for j in range(Ho):
                        for l in range(Wo):
                            o[b, c, argmax[b, c, i, j, l]] += grad_out[b, c, i, j, l]
    return out.reshape(B, C, D, H, W)


def eals_update(double[:, ::1] P, double[:, ::1] Q, cnp.int64_t[::1] indptr,
                cnp.int64_t[::1] indices, cnp.int64_t[::1] pos, double[::1] pred,
                double w_obs, double c0, double lam):
    cdef Py_ssize_t n_rows = P.shape[0], k = P.shape[1]
    G_arr = np.asarray(Q).T @ np.asarray(Q)
    cdef double[:, ::1] G = np.ascontiguousarray(G_arr)
    cdef Py_ssize_t u, f, g, e, i, s
    cdef double num, den, miss, rest, qf, old, new, delta
    with nogil:
        for u in range(n_rows):
            for f in range(k):
                num = 0.0
                den = c0 * G[f, f] + lam
                old = P[u, f]
                for e in range(indptr[u], indptr[u + 1]):
                    i = indices[e]
                    qf = Q[i, f]
                    rest = pred[pos[e]] - old * qf
                    num += (w_obs * (1.0 - rest) + c0 * rest) * qf
                    den += (w_obs - c0) * qf * qf
                miss = 0.0
                for g in range(k):
                    if g != f:
                        miss += P[u, g] * G[g, f]
                num -= c0 * miss
                if den > 0.0:
                    new = num / den
                else:
                    new = old
                delta = new - old
                if delta != 0.0:
                    for e in range(indptr[u], indptr[u + 1]):
                        pred[pos[e]] += delta * Q[indices[e], f]
                P[u, f] = new
    return None
