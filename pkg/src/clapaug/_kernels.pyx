# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Signatures mirror ``_kernels_py``."""

import math

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


def fnv1a64(const unsigned char[:] data):
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= FNV_PRIME
    return h


def contrastive_loss_grad(const double[:, ::1] C):
    cdef Py_ssize_t B = C.shape[0]
    cdef Py_ssize_t i, j
    cdef double mx, s, e
    grad_arr = np.zeros((B, B), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    row_terms = np.empty(B, dtype=np.float64)
    col_terms = np.empty(B, dtype=np.float64)
    cdef double[::1] rt = row_terms
    cdef double[::1] ct = col_terms

    for i in range(B):
        mx = C[i, 0]
        for j in range(1, B):
            if C[i, j] > mx:
                mx = C[i, j]
        s = 0.0
        for j in range(B):
            e = exp(C[i, j] - mx)
            grad[i, j] = e
            s += e
        for j in range(B):
            grad[i, j] = 0.5 * (grad[i, j] / s)
        rt[i] = (mx - C[i, i]) + log(s)

    for j in range(B):
        mx = C[0, j]
        for i in range(1, B):
            if C[i, j] > mx:
                mx = C[i, j]
        s = 0.0
        for i in range(B):
            s += exp(C[i, j] - mx)
        for i in range(B):
            grad[i, j] += 0.5 * (exp(C[i, j] - mx) / s)
        ct[j] = (mx - C[j, j]) + log(s)

    for i in range(B):
        grad[i, i] -= 1.0
        for j in range(B):
            grad[i, j] /= B

    loss_text = math.fsum(row_terms.tolist()) / B
    loss_audio = math.fsum(col_terms.tolist()) / B
    return 0.5 * (loss_text + loss_audio), grad_arr


def embedding_bag_forward(const double[:, ::1] table, const cnp.int64_t[::1] ids,
                          const cnp.int64_t[::1] offsets):
    cdef Py_ssize_t n_bags = offsets.shape[0] - 1
    cdef Py_ssize_t E = table.shape[1]
    cdef Py_ssize_t b, t, k
    cdef double cnt
    out_arr = np.zeros((n_bags, E), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for b in range(n_bags):
        for t in range(offsets[b], offsets[b + 1]):
            for k in range(E):
                out[b, k] += table[ids[t], k]
        cnt = <double>(offsets[b + 1] - offsets[b])
        for k in range(E):
            out[b, k] = out[b, k] / cnt
    return out_arr


def embedding_bag_backward(double[:, ::1] grad_table, const double[:, ::1] grad_out,
                           const cnp.int64_t[::1] ids, const cnp.int64_t[::1] offsets):
    cdef Py_ssize_t n_bags = offsets.shape[0] - 1
    cdef Py_ssize_t E = grad_out.shape[1]
    cdef Py_ssize_t b, t, k
    cdef double cnt
    for b in range(n_bags):
        cnt = <double>(offsets[b + 1] - offsets[b])
        for t in range(offsets[b], offsets[b + 1]):
            for k in range(E):
                grad_table[ids[t], k] += grad_out[b, k] / cnt


def adam_update(param, grad, m, v, double lr, double beta1, double beta2,
                double eps, double bias1, double bias2):
    cdef double[::1] p = param.reshape(-1)
    cdef const double[::1] g = grad.reshape(-1)
    cdef double[::1] mm = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef Py_ssize_t i
    cdef double gi
    for i in range(p.shape[0]):
        gi = g[i]
        mm[i] = mm[i] * beta1 + (1.0 - beta1) * gi
        vv[i] = vv[i] * beta2 + (1.0 - beta2) * (gi * gi)
        p[i] -= lr * (mm[i] / bias1) / (sqrt(vv[i] / bias2) + eps)


def diagonal_ranks(const double[:, ::1] S):
    cdef Py_ssize_t n = S.shape[0]
    cdef Py_ssize_t m = S.shape[1]
    cdef Py_ssize_t i, j
    cdef long r
    cdef double d
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    for i in range(n):
        d = S[i, i]
        r = 0
        for j in range(m):
            if S[i, j] > d or (S[i, j] == d and j < i):
                r += 1
        out[i] = r
    return out_arr


def average_precision(scores, relevance):
    cdef Py_ssize_t n_items = scores.shape[0]
    cdef Py_ssize_t n_labels = scores.shape[1]
    cdef Py_ssize_t j, r
    cdef long hits, n_pos
    cdef double acc
    cdef const cnp.int64_t[::1] order
    cdef const unsigned char[:, :] rel = (np.asarray(relevance) != 0).view(np.uint8)
    out = np.empty(n_labels, dtype=np.float64)
    for j in range(n_labels):
        order = np.argsort(-scores[:, j], kind="stable").astype(np.int64)
        hits = 0
        acc = 0.0
        for r in range(n_items):
            if rel[order[r], j]:
                hits += 1
                acc += <double>hits / <double>(r + 1)
        n_pos = hits
        out[j] = acc / n_pos if n_pos else np.nan
    return out
