"""Choosing which prompt tokens survive at a selection layer.

The score of prompt token ``j`` is how strongly the last prompt token's query
attends to its key. Per query head the scaled logits ``q·k_j / sqrt(d)`` are
softmaxed over positions and the resulting rows are summed across heads
(``aggregation="softmax_sum"``). ``"raw_logit_sum"`` sums the scaled logits
instead. Heads are summed after sorting each column, which makes the result
independent of head order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels

AGGREGATIONS = ("softmax_sum", "raw_logit_sum")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionSchedule:
    """Selection layers, survivors per stage and how many stages truncate.

    ``layers`` ascend, ``token_counts`` descend; the first
    ``truncation_count`` stages also prune the KV caches of every layer
    processed so far.
    """

    layers: tuple[int, ...]
    token_counts: tuple[int, ...]
    truncation_count: int = 1
    force_include_last: bool = True
    aggregation: str = "softmax_sum"
    clamped: bool = field(default=False, compare=False)

    @classmethod
    def single(cls, layer: int, k: int, **kw) -> SelectionSchedule:
        return cls((int(layer),), (int(k),), 1, **kw)

    @property
    def is_single_stage(self) -> bool:
        return len(self.layers) == 1

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "token_counts": list(self.token_counts),
            "truncation_count": self.truncation_count,
            "force_include_last": self.force_include_last,
            "aggregation": self.aggregation,
            "clamped": self.clamped,
        }


@dataclass
class SelectionOutcome:
    indices: list[int]
    original_positions: list[int]
    per_token_scores: np.ndarray

    def to_dict(self) -> dict:
        return {
            "indices": self.indices,
            "original_positions": self.original_positions,
            "per_token_scores": [float(s) for s in self.per_token_scores],
        }


def validate_schedule(s: SelectionSchedule, num_layers: int, prompt_len: int) -> SelectionSchedule:
    """Check a schedule against a model depth and prompt length.

    Token counts larger than the prompt are clamped to it and the returned
    schedule has ``clamped=True``.
    """
    layers, counts = list(s.layers), list(s.token_counts)
    if not layers or len(layers) != len(counts):
        raise ScheduleError(
            f"layers {layers} and token_counts {counts} must be non-empty and the same length"
        )
    if s.aggregation not in AGGREGATIONS:
        raise ScheduleError(f"unknown aggregation {s.aggregation!r}")
    for i, r in enumerate(layers):
        if not 0 <= r < num_layers:
            raise ScheduleError(f"selection layer {r} (stage {i}) outside 0..{num_layers - 1}")
    for i in range(1, len(layers)):
        if layers[i] <= layers[i - 1]:
            raise ScheduleError(
                f"selection layers must strictly ascend: stage {i - 1} layer {layers[i - 1]} "
                f">= stage {i} layer {layers[i]}"
            )
    for i, k in enumerate(counts):
        if k < 1:
            raise ScheduleError(f"token count {k} (stage {i}) must be >= 1")
    for i in range(1, len(counts)):
        if counts[i] >= counts[i - 1]:
            raise ScheduleError(
                f"token counts must strictly descend: stage {i - 1} k={counts[i - 1]} "
                f"<= stage {i} k={counts[i]}"
            )
    if not 1 <= s.truncation_count <= len(layers):
        raise ScheduleError(f"truncation_count {s.truncation_count} outside 1..{len(layers)}")
    if prompt_len < 1:
        raise ScheduleError("prompt must hold at least one token")
    clamped = [min(k, prompt_len) for k in counts]
    return replace(s, layers=tuple(layers), token_counts=tuple(clamped), clamped=clamped != counts)


def head_scores(q_last, keys, aggregation: str = "softmax_sum") -> np.ndarray:
    """Aggregated importance score per key row.

    ``q_last`` is (h, d); ``keys`` is (len, h_kv, d).
    """
    q_last = np.asarray(q_last, dtype=np.float32)
    keys = np.asarray(keys, dtype=np.float32)
    h, d = q_last.shape
    n, hkv, _ = keys.shape
    if n == 0:
        raise kernels.KernelError("select needs at least one key")
    group = h // hkv
    scale = np.float32(1.0 / math.sqrt(d))
    per_head = np.empty((h, n), dtype=np.float32)
    for head in range(h):
        logits = kernels.matmul(q_last[head:head + 1], keys[:, head // group, :], transpose_b=True) * scale
        if aggregation == "softmax_sum":
            per_head[head] = kernels.softmax_rows(logits)[0]
        elif aggregation == "raw_logit_sum":
            per_head[head] = logits[0]
        else:
            raise ValueError(f"unknown aggregation {aggregation!r}")
    # sorting each column first makes the sum independent of head order
    return np.sort(per_head.astype(np.float64), axis=0).sum(axis=0)


def select(q_last, keys, k: int, force_include_last: bool = True,
           aggregation: str = "softmax_sum", positions=None) -> SelectionOutcome:
    """Top-``k`` rows of ``keys`` by aggregated attention from ``q_last``.

    ``k`` larger than the number of keys selects everything. With
    ``force_include_last`` the final row is always kept, displacing the
    lowest-scoring pick (the larger index among equal scores).
    """
    if k < 1:
        raise kernels.KernelError(f"k must be >= 1, got {k}")
    scores = head_scores(q_last, keys, aggregation)
    n = scores.shape[0]
    indices = kernels.top_k_indices(scores, min(k, n))
    if force_include_last and indices[-1] != n - 1:
        worst = min(indices, key=lambda i: (scores[i], -i))
        indices.remove(worst)
        indices.append(n - 1)
        indices.sort()
    pos = np.arange(n) if positions is None else np.asarray(positions)
    return SelectionOutcome(
        indices=indices,
        original_positions=[int(pos[i]) for i in indices],
        per_token_scores=scores,
    )
