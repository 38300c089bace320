"""Synthetic planted-needle prompts and an oracle model that provably finds them.

The oracle model zeroes every attention output and MLP projection, so the
residual stream of each row stays equal to its embedding at every layer.
Needle tokens embed along one basis direction, filler tokens along another.
Queries (from either kind of token) and needle keys point into the last
rotary pair of every head, filler keys are zero. The score of a needle key
is then ``|q||k| cos(distance * f) / sqrt(d)`` with ``f`` the slowest rotary
frequency, which stays positive while ``n * f < pi/2``; every filler scores
exactly zero. The needle span is therefore the unique top-k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelBundle, ModelConfig, tensor_shapes


class NeedleError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedNeedleSpec:
    haystack_len: int
    needle: tuple[int, ...]
    depth: float
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.depth <= 100:
            raise NeedleError(f"depth must lie in [0, 100], got {self.depth}")
        if not self.needle:
            raise NeedleError("needle must hold at least one token")
        if len(self.needle) >= self.haystack_len:
            raise NeedleError(
                f"needle of {len(self.needle)} tokens does not fit a haystack of {self.haystack_len}"
            )

    @property
    def start(self) -> int:
        return int(round(self.depth / 100.0 * (self.haystack_len - len(self.needle))))

    @property
    def span(self) -> list[int]:
        return list(range(self.start, self.start + len(self.needle)))


def synth_prompt(spec: PlantedNeedleSpec, vocab_size: int) -> tuple[list[int], list[int]]:
    """(token ids, ground-truth needle indices).

    Filler ids are drawn uniformly from the vocabulary minus the needle ids.
    """
    needle_ids = set(spec.needle)
    if max(needle_ids) >= vocab_size or min(needle_ids) < 0:
        raise NeedleError("needle ids must lie inside the vocabulary")
    filler_pool = np.array([t for t in range(vocab_size) if t not in needle_ids], dtype=np.int64)
    if filler_pool.size == 0:
        raise NeedleError("no vocabulary ids left for filler")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    tokens = rng.choice(filler_pool, size=spec.haystack_len).tolist()
    tokens[spec.start:spec.start + len(spec.needle)] = list(spec.needle)
    return tokens, spec.span


def random_needle(length: int, vocab_size: int, seed: int) -> tuple[int, ...]:
    rng = np.random.Generator(np.random.PCG64(seed))
    return tuple(int(t) for t in rng.choice(vocab_size, size=length, replace=False))


def oracle_bundle(config: ModelConfig, needle_ids, max_len: int) -> ModelBundle:
    """Hand-built model whose selection scores single out ``needle_ids``.

    ``max_len`` is the longest prompt the construction must hold for.
    """
    d = config.head_dim
    slowest = config.rope_theta ** (-(d - 2) / d)
    if max_len * slowest >= math.pi / 2:
        raise NeedleError(
            f"rope_theta={config.rope_theta} rotates the slowest pair past 90 degrees within "
            f"{max_len} tokens; raise rope_theta"
        )
    D = config.model_dim
    weights = {name: np.zeros(shape, dtype=np.float32) for name, shape in tensor_shapes(config).items()}
    emb = weights["embed_tokens"]
    emb[:, 1] = 1.0
    for t in set(int(i) for i in needle_ids):
        emb[t, 1] = 0.0
        emb[t, 0] = 1.0
    for i in range(config.num_layers):
        p = f"layers.{i}."
        weights[p + "attn_norm"][:] = 1.0
        weights[p + "mlp_norm"][:] = 1.0
        for head in range(config.num_q_heads):
            weights[p + "wq"][0, head * d + d - 2] = 1.0
            weights[p + "wq"][1, head * d + d - 2] = 1.0
        for kv in range(config.num_kv_heads):
            weights[p + "wk"][0, kv * d + d - 2] = 1.0
    weights["final_norm"][:] = 1.0
    rng = np.random.Generator(np.random.PCG64(config.seed))
    weights["lm_head"][:] = (rng.standard_normal((D, config.vocab_size)) / math.sqrt(D)).astype(np.float32)
    return ModelBundle(config, weights)
