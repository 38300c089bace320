"""Per-layer key/value storage with explicit absolute positions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CacheError(ValueError):
    """Position-ordering or index violation on a KV cache."""


@dataclass
class LayerKVCache:
    """Keys/values of shape (len, h_kv, d) plus one absolute position per entry.

    Positions are strictly increasing. ``gather`` replaces the arrays with
    compact copies, so dropped entries are released immediately.
    """

    num_kv_heads: int
    head_dim: int
    keys: np.ndarray = field(default=None, repr=False)
    values: np.ndarray = field(default=None, repr=False)
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (0, self.num_kv_heads, self.head_dim)
        if self.keys is None:
            self.keys = np.empty(shape, dtype=np.float32)
        if self.values is None:
            self.values = np.empty(shape, dtype=np.float32)
        if self.positions is None:
            self.positions = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def append(self, new_k, new_v, new_positions) -> LayerKVCache:
        new_k = np.asarray(new_k, dtype=np.float32)
        new_v = np.asarray(new_v, dtype=np.float32)
        new_positions = np.asarray(new_positions, dtype=np.int64)
        t = new_positions.shape[0]
        expected = (t, self.num_kv_heads, self.head_dim)
        if new_k.shape != expected or new_v.shape != expected:
            raise CacheError(f"append expects k/v of shape {expected}, got {new_k.shape}/{new_v.shape}")
        if t == 0:
            return self
        if t > 1 and np.any(np.diff(new_positions) <= 0):
            raise CacheError("appended positions are not strictly increasing")
        if len(self) and new_positions[0] <= self.positions[-1]:
            raise CacheError(
                f"appended position {int(new_positions[0])} is not after cached position "
                f"{int(self.positions[-1])}"
            )
        self.keys = np.concatenate([self.keys, new_k])
        self.values = np.concatenate([self.values, new_v])
        self.positions = np.concatenate([self.positions, new_positions])
        return self

    def gather(self, indices) -> LayerKVCache:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise CacheError("gather indices must be a flat list")
        if idx.size and (idx[0] < 0 or idx[-1] >= len(self)):
            raise CacheError(f"gather index out of range for cache of length {len(self)}")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise CacheError("gather indices must be ascending and unique")
        self.keys = np.ascontiguousarray(self.keys[idx])
        self.values = np.ascontiguousarray(self.values[idx])
        self.positions = np.ascontiguousarray(self.positions[idx])
        return self

    def scalar_count(self) -> int:
        return 2 * len(self) * self.num_kv_heads * self.head_dim


class CacheSet(list):
    """One ``LayerKVCache`` per layer."""

    @classmethod
    def empty(cls, num_layers: int, num_kv_heads: int, head_dim: int) -> CacheSet:
        return cls(LayerKVCache(num_kv_heads, head_dim) for _ in range(num_layers))

    def lengths(self) -> list[int]:
        return [len(c) for c in self]

    def to_dump(self) -> dict:
        """JSON-ready per-layer lengths and position lists."""
        return {
            "layers": [
                {"layer": i, "length": len(c), "positions": c.positions.tolist()}
                for i, c in enumerate(self)
            ]
        }


def truncate_prefix_layers(caches: CacheSet, upto_layer: int, indices) -> CacheSet:
    """Gather ``indices`` in every layer 0..upto_layer inclusive."""
    idx = np.asarray(indices, dtype=np.int64)
    if not 0 <= upto_layer < len(caches):
        raise CacheError(f"upto_layer {upto_layer} outside 0..{len(caches) - 1}")
    # validate every layer first so a failure leaves the set untouched
    for j in range(upto_layer + 1):
        if idx.size and idx.max() >= len(caches[j]):
            raise CacheError(
                f"layer {j}: index {int(idx.max())} out of range for cache of length {len(caches[j])}"
            )
    for j in range(upto_layer + 1):
        try:
            caches[j].gather(idx)
        except CacheError as exc:
            raise CacheError(f"layer {j}: {exc}") from exc
    return caches


def cache_entry_count(caches: CacheSet) -> dict:
    """Stored key+value scalars per layer and in total (physical kv-head count)."""
    per_layer = [c.scalar_count() for c in caches]
    return {"per_layer": per_layer, "total": sum(per_layer)}
