"""Dense float32 kernels for the transformer.

The hot kernels (``matmul``, ``softmax_rows``, ``causal_attention``) come
from the compiled ``_core`` extension when it is built, otherwise from the
numpy fallback. Set ``DISTILL_KERNELS=python`` to force the fallback, or
``DISTILL_KERNELS=compiled`` to fail loudly when the extension is missing.

Matrices are C-contiguous ``float32`` numpy arrays. Matmul accumulates each
output element sequentially over the shared dimension in float32, so results
are reproducible bit for bit and identical across both backends.
"""

from __future__ import annotations

import contextlib
import os
from types import ModuleType

import numpy as np

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

__all__ = [
    "KernelError",
    "backend_name",
    "causal_attention",
    "compiled_available",
    "matmul",
    "rmsnorm",
    "rope_apply",
    "softmax_rows",
    "top_k_indices",
    "use_backend",
]


class KernelError(ValueError):
    """Invalid kernel input (shape mismatch, bad k, empty attention row)."""


def _pick_backend(name: str) -> ModuleType:
    if name == "python":
        return _fallback
    if name == "compiled":
        if _core is None:
            raise ImportError("DISTILL_KERNELS=compiled but kvdistill.kernels._core is not built")
        return _core
    if name != "auto":
        raise ValueError(f"unknown kernel backend {name!r}")
    return _core if _core is not None else _fallback


_backend = _pick_backend(os.environ.get("DISTILL_KERNELS", "auto"))


def compiled_available() -> bool:
    return _core is not None


def backend_name() -> str:
    return "compiled" if _backend is _core else "python"


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch kernel backend ("python", "compiled" or "auto")."""
    global _backend
    previous = _backend
    _backend = _pick_backend(name)
    try:
        yield
    finally:
        _backend = previous


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def _positions(p) -> np.ndarray:
    if p is None:
        return np.empty(0, dtype=np.int64)
    return np.ascontiguousarray(p, dtype=np.int64)


def matmul(a, b, transpose_b: bool = False) -> np.ndarray:
    """Dense product ``a @ b`` (or ``a @ b.T``) in float32.

    For each output element the products are added in ascending order of the
    shared index, starting from 0.0, with no fused multiply-add.
    """
    a, b = _f32(a), _f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise KernelError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    inner = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner:
        op = "a @ b.T" if transpose_b else "a @ b"
        raise KernelError(f"matmul shape mismatch for {op}: a{a.shape}, b{b.shape}")
    return _backend.matmul(a, b, bool(transpose_b))


def softmax_rows(a, qpos=None, kpos=None) -> np.ndarray:
    """Row-wise softmax with optional causal masking by position.

    With ``qpos`` (one id per row) and ``kpos`` (one id per column), entry
    (i, j) is masked to exactly 0 when ``kpos[j] > qpos[i]``.
    """
    a = _f32(a)
    if a.ndim != 2:
        raise KernelError(f"softmax_rows expects a 2-D array, got shape {a.shape}")
    if (qpos is None) != (kpos is None):
        raise KernelError("softmax_rows needs both qpos and kpos, or neither")
    qp, kp = _positions(qpos), _positions(kpos)
    if qpos is not None and (qp.shape[0] != a.shape[0] or kp.shape[0] != a.shape[1]):
        raise KernelError(
            f"mask positions {qp.shape[0]}x{kp.shape[0]} do not match scores {a.shape}"
        )
    out = _backend.softmax_rows(a, qp, kp)
    if out is None or (a.shape[0] and a.shape[1] == 0):
        raise KernelError("softmax_rows: a row has no unmasked entries (empty attention context)")
    return out


def causal_attention(q, k, v, qpos, kpos, scale: float) -> np.ndarray:
    """Scaled dot-product attention with grouped-query heads.

    ``q`` is (nq, h, d); ``k`` and ``v`` are (nk, h_kv, d) with ascending
    ``kpos``. Each query head ``i`` reads kv head ``i // (h // h_kv)``.
    """
    q, k, v = _f32(q), _f32(k), _f32(v)
    qp, kp = _positions(qpos), _positions(kpos)
    if q.ndim != 3 or k.ndim != 3 or k.shape != v.shape:
        raise KernelError(f"bad attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[2] != k.shape[2] or q.shape[1] % k.shape[1]:
        raise KernelError(f"incompatible heads q{q.shape} k{k.shape}")
    if qp.shape[0] != q.shape[0] or kp.shape[0] != k.shape[0]:
        raise KernelError("position ids do not match row counts")
    out = _backend.causal_attention(q, k, v, qp, kp, np.float32(scale))
    if out is None:
        raise KernelError("causal_attention: a query row has no visible keys")
    return out


def rmsnorm(x, gain, eps: float) -> np.ndarray:
    """``x / sqrt(mean(x**2) + eps) * gain`` applied to each row of ``x``.

    The sum of squares is accumulated left to right in float32.
    """
    x = _f32(x)
    gain = _f32(gain)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != gain.shape[0]:
        raise KernelError(f"rmsnorm: row length {x.shape[-1]} != gain length {gain.shape[0]}")
    ss = np.zeros(x.shape[0], dtype=np.float32)
    for j in range(x.shape[1]):
        ss += x[:, j] * x[:, j]
    denom = np.sqrt(ss / np.float32(x.shape[1]) + np.float32(eps)).astype(np.float32)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(denom[:, None] > 0, x / denom[:, None], np.float32(0)) * gain
    y = y.astype(np.float32)
    return y[0] if squeeze else y


def rope_apply(x, positions, theta: float) -> np.ndarray:
    """Rotary position embedding on the last axis of ``x``.

    Pairs are interleaved: (x[2i], x[2i+1]) is rotated by
    ``pos * theta ** (-2i / head_dim)``. ``x`` is (len, head_dim) or
    (len, heads, head_dim); ``positions`` has one id per row.
    """
    x = _f32(x)
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise KernelError(f"rope_apply needs an even head_dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[0],):
        raise KernelError(f"rope_apply: {pos.shape[0]} positions for {x.shape[0]} rows")
    inv_freq = float(theta) ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    if x.ndim == 3:
        cos, sin = cos[:, None, :], sin[:, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def top_k_indices(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, in ascending index order.

    Equal scores are ranked by smaller index first.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise KernelError(f"top_k_indices expects a vector, got shape {s.shape}")
    if not 1 <= k <= s.shape[0]:
        raise KernelError(f"k={k} out of range for {s.shape[0]} scores")
    order = np.argsort(-s, kind="stable")[:k]
    return sorted(int(i) for i in order)
