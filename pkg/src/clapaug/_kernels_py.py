"""Pure-Python/numpy implementations of the hot kernels.

Each function here has a compiled twin in ``_kernels.pyx`` with the same
signature. ``clapaug.kernels`` picks one at import time.
"""

import math

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def contrastive_loss_grad(C: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric cross-entropy over the diagonal of ``C`` and its gradient."""
    B = C.shape[0]
    row_max = C.max(axis=1, keepdims=True)
    row_exp = np.exp(C - row_max)
    row_sum = row_exp.sum(axis=1, keepdims=True)
    col_max = C.max(axis=0, keepdims=True)
    col_exp = np.exp(C - col_max)
    col_sum = col_exp.sum(axis=0, keepdims=True)

    diag = np.diagonal(C)
    # (max - diag) first, so a constant matrix gives exactly log(B)
    row_terms = (row_max[:, 0] - diag) + np.log(row_sum[:, 0])
    col_terms = (col_max[0, :] - diag) + np.log(col_sum[0, :])
    loss_text = math.fsum(row_terms.tolist()) / B
    loss_audio = math.fsum(col_terms.tolist()) / B
    loss = 0.5 * (loss_text + loss_audio)

    grad = 0.5 * (row_exp / row_sum + col_exp / col_sum)
    grad[np.diag_indices(B)] -= 1.0
    grad /= B
    return loss, grad


def embedding_bag_forward(table: np.ndarray, ids: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    counts = np.diff(offsets).astype(np.float64)
    sums = np.add.reduceat(table[ids], offsets[:-1], axis=0)
    return sums / counts[:, None]


def embedding_bag_backward(grad_table: np.ndarray, grad_out: np.ndarray,
                           ids: np.ndarray, offsets: np.ndarray) -> None:
    counts = np.diff(offsets)
    scaled = grad_out / counts[:, None].astype(np.float64)
    np.add.at(grad_table, ids, np.repeat(scaled, counts, axis=0))


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr: float, beta1: float, beta2: float, eps: float,
                bias1: float, bias2: float) -> None:
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


def diagonal_ranks(S: np.ndarray) -> np.ndarray:
    """0-based rank of ``S[i, i]`` within row ``i``; ties go to the lower index."""
    n = S.shape[0]
    diag = np.diagonal(S)[:, None]
    idx = np.arange(S.shape[1])
    better = (S > diag).sum(axis=1)
    tied_before = ((S == diag) & (idx[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return (better + tied_before).astype(np.int64)


def average_precision(scores: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """Per-column AP; items ranked by descending score, ties by ascending index."""
    n_items, n_labels = scores.shape
    out = np.empty(n_labels)
    for j in range(n_labels):
        order = np.argsort(-scores[:, j], kind="stable")
        rel = relevance[order, j] != 0
        n_pos = int(rel.sum())
        if n_pos == 0:
            out[j] = np.nan
            continue
        hits = np.cumsum(rel)
        ranks = np.arange(1, n_items + 1)
        out[j] = float((hits[rel] / ranks[rel]).sum()) / n_pos
    return out
