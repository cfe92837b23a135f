# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contract as ``drolt._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log

cnp.import_array()


cdef void _distances(const double[:, ::1] mu, const double[:, ::1] z,
                     double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t c, j, k
    cdef double acc, t
    for c in range(mu.shape[0]):
        for j in range(z.shape[0]):
            acc = 0.0
            for k in range(z.shape[1]):
                t = mu[c, k] - z[j, k]
                acc += t * t
            out[c, j] = sqrt(acc)


def pairwise_distances(centroids, embeddings):
    cdef const double[:, ::1] mu = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef const double[:, ::1] z = np.ascontiguousarray(embeddings, dtype=np.float64)
    out = np.empty((mu.shape[0], z.shape[0]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        _distances(mu, z, ov)
    return out


def margin_loss(embeddings, labels, centroids, eps, weights, double sign, bint need_grad):
    cdef const double[:, ::1] z = np.ascontiguousarray(embeddings, dtype=np.float64)
    cdef const cnp.int64_t[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef const double[:, ::1] mu = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef const double[::1] ep = np.ascontiguousarray(eps, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n_classes = mu.shape[0]
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t dim = z.shape[1]
    cdef Py_ssize_t c, j, k, i

    dist_arr = np.empty((n_classes, n), dtype=np.float64)
    score_arr = np.empty((n_classes, n), dtype=np.float64)
    lse_arr = np.zeros(n_classes, dtype=np.float64)
    count_arr = np.zeros(n_classes, dtype=np.float64)
    per_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] dist = dist_arr
    cdef double[:, ::1] score = score_arr
    cdef double[::1] lse = lse_arr
    cdef double[::1] counts = count_arr
    cdef double[::1] per = per_arr
    cdef double m, acc, shift, value = 0.0

    with nogil:
        _distances(mu, z, dist)
        for j in range(n):
            counts[y[j]] += 1.0
        for c in range(n_classes):
            if counts[c] == 0.0:
                continue
            shift = 2.0 * sign * ep[c]
            m = -1e308
            for j in range(n):
                score[c, j] = -dist[c, j]
                if y[j] == c:
                    score[c, j] -= shift
                if score[c, j] > m:
                    m = score[c, j]
            acc = 0.0
            for j in range(n):
                score[c, j] = exp(score[c, j] - m)
                acc += score[c, j]
            lse[c] = m + log(acc)
            # keep normalized probabilities in `score` for the backward pass
            for j in range(n):
                score[c, j] /= acc
        for i in range(n):
            c = y[i]
            per[i] = dist[c, i] + 2.0 * sign * ep[c] + lse[c]
            value += w[c] * per[i]

    if not need_grad:
        return value, per_arr, None, None, None

    gz_arr = np.zeros((n, dim), dtype=np.float64)
    gm_arr = np.zeros((n_classes, dim), dtype=np.float64)
    ge_arr = np.zeros(n_classes, dtype=np.float64)
    cdef double[:, ::1] gz = gz_arr
    cdef double[:, ::1] gm = gm_arr
    cdef double[::1] ge = ge_arr
    cdef double g, coef

    with nogil:
        for c in range(n_classes):
            if counts[c] == 0.0:
                continue
            for j in range(n):
                g = w[c] * counts[c] * score[c, j]
                if y[j] == c:
                    g -= w[c]
                    ge[c] -= 2.0 * sign * g
                if dist[c, j] > 0.0:
                    coef = -g / dist[c, j]
                    for k in range(dim):
                        acc = coef * (z[j, k] - mu[c, k])
                        gz[j, k] += acc
                        gm[c, k] -= acc
    return value, per_arr, gz_arr, gm_arr, ge_arr


def nearest_centroid(centroids, points):
    cdef const double[:, ::1] mu = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef const double[:, ::1] x = np.ascontiguousarray(points, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef Py_ssize_t c, j, k, best
    cdef double acc, t, best_d
    with nogil:
        for j in range(x.shape[0]):
            best = 0
            best_d = -1.0
            for c in range(mu.shape[0]):
                acc = 0.0
                for k in range(x.shape[1]):
                    t = mu[c, k] - x[j, k]
                    acc += t * t
                if best_d < 0.0 or acc < best_d:
                    best_d = acc
                    best = c
            ov[j] = best
    return out
