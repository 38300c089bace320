"""Pure numpy kernels with the same accumulation order as the compiled core.

Reductions are written as explicit Python loops over the reduced axis with
vectorised float32 updates, so each output element sees exactly the sequence
``acc = acc + x * y`` that the compiled loops perform.
"""

from __future__ import annotations

import numpy as np


def _exp32(x: np.ndarray) -> np.ndarray:
    return np.exp(x.astype(np.float64)).astype(np.float32)


def matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool) -> np.ndarray:
    bt = b if transpose_b else b.T
    out = np.zeros((a.shape[0], bt.shape[0]), dtype=np.float32)
    for p in range(a.shape[1]):
        out += a[:, p, None] * bt[None, :, p]
    return out


def softmax_rows(a: np.ndarray, qpos: np.ndarray, kpos: np.ndarray):
    rows, cols = a.shape
    if qpos.shape[0] > 0:
        valid = kpos[None, :] <= qpos[:, None]
    else:
        valid = np.ones((rows, cols), dtype=bool)
    if rows and not valid.any(axis=1).all():
        return None
    if cols == 0:
        return np.zeros((rows, cols), dtype=np.float32)
    mx = np.where(valid, a, -np.inf).max(axis=1).astype(np.float32)
    e = np.where(valid, _exp32(np.where(valid, a - mx[:, None], 0)), 0).astype(np.float32)
    total = np.zeros(rows, dtype=np.float32)
    for j in range(cols):
        total += e[:, j]
    return (e / total[:, None]).astype(np.float32)


def causal_attention(q, k, v, qpos, kpos, scale):
    nq, h, d = q.shape
    hkv = k.shape[1]
    group = h // hkv
    out = np.empty((nq, h, d), dtype=np.float32)
    scale = np.float32(scale)
    for hd in range(h):
        kv = hd // group
        kh = np.ascontiguousarray(k[:, kv, :])
        scores = matmul(np.ascontiguousarray(q[:, hd, :]), kh, True) * scale
        probs = softmax_rows(scores, qpos, kpos)
        if probs is None:
            return None
        out[:, hd, :] = matmul(probs, np.ascontiguousarray(v[:, kv, :]), False)
    return out
