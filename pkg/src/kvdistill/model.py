"""Tiny Llama-style decoder: config, weights, bundle I/O and the forward pass.

Block wiring (pre-norm, residual)::

    a = RMSNorm(x) ; q, k, v = a @ Wq, a @ Wk, a @ Wv ; RoPE(q, k)
    x = x + Attn(q, cache ⊕ k, cache ⊕ v) @ Wo
    b = RMSNorm(x) ; x = x + (silu(b @ Wgate) * (b @ Wup)) @ Wdown

followed by a final RMSNorm and the LM head on the last row. Projection
weights are stored input-major, (in_features, out_features), so a projection
is ``x @ W``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kernels
from .cache import CacheSet, LayerKVCache
from .costs import CostLedger


class ConfigError(ValueError):
    """Invalid model configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BundleError(ValueError):
    """Malformed bundle on disk or in memory."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    model_dim: int
    mlp_hidden_dim: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim",
                     "model_dim", "mlp_hidden_dim", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {value!r}")
        if self.num_q_heads % self.num_kv_heads:
            raise ConfigError(
                "num_kv_heads",
                f"{self.num_q_heads} query heads are not divisible into {self.num_kv_heads} kv groups",
            )
        if self.model_dim != self.num_q_heads * self.head_dim:
            raise ConfigError(
                "model_dim",
                f"{self.model_dim} != num_q_heads * head_dim = {self.num_q_heads * self.head_dim}",
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim", "must be even for rotary embeddings")
        if not self.rope_theta > 0:
            raise ConfigError("rope_theta", "must be positive")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps", "must be positive")

    @classmethod
    def build(cls, num_layers, num_q_heads, num_kv_heads, head_dim, vocab_size,
              mlp_hidden_dim=None, rope_theta=10000.0, norm_eps=1e-5, seed=0) -> ModelConfig:
        """Config with ``model_dim = heads * head_dim`` and a 2x MLP by default."""
        model_dim = num_q_heads * head_dim
        return cls(
            num_layers=num_layers,
            num_q_heads=num_q_heads,
            num_kv_heads=num_kv_heads,
            head_dim=head_dim,
            model_dim=model_dim,
            mlp_hidden_dim=mlp_hidden_dim or 2 * model_dim,
            vocab_size=vocab_size,
            rope_theta=float(rope_theta),
            norm_eps=float(norm_eps),
            seed=seed,
        )

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        missing = names - set(data)
        if missing:
            raise ConfigError(sorted(missing)[0], "missing from config")
        return cls(**{k: data[k] for k in names})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_theta"] = float(d["rope_theta"])
        d["norm_eps"] = float(d["norm_eps"])
        return d


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor, in canonical (storage and init) order."""
    D, H = config.model_dim, config.mlp_hidden_dim
    q_out = config.num_q_heads * config.head_dim
    kv_out = config.num_kv_heads * config.head_dim
    shapes = {"embed_tokens": (config.vocab_size, D)}
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (D,)
        shapes[p + "wq"] = (D, q_out)
        shapes[p + "wk"] = (D, kv_out)
        shapes[p + "wv"] = (D, kv_out)
        shapes[p + "wo"] = (q_out, D)
        shapes[p + "mlp_norm"] = (D,)
        shapes[p + "w_gate"] = (D, H)
        shapes[p + "w_up"] = (D, H)
        shapes[p + "w_down"] = (H, D)
    shapes["final_norm"] = (D,)
    shapes["lm_head"] = (D, config.vocab_size)
    return shapes


@dataclass
class ModelBundle:
    config: ModelConfig
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if set(self.weights) != set(expected):
            extra = sorted(set(self.weights) ^ set(expected))
            raise BundleError(f"tensor set mismatch: {extra[:5]}")
        for name, shape in expected.items():
            w = self.weights[name]
            if w.shape != shape or w.dtype != np.float32:
                raise BundleError(f"{name}: expected float32{shape}, got {w.dtype}{w.shape}")
            if not np.isfinite(w).all():
                raise BundleError(f"{name}: non-finite entries")
            w.setflags(write=False)
        self._layer_bytes = [
            sum(self.weights[n].nbytes for n in expected if n.startswith(f"layers.{i}."))
            for i in range(self.config.num_layers)
        ]

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.weights[f"layers.{i}.{name}"]

    def layer_weight_bytes(self, i: int = 0) -> int:
        return self._layer_bytes[i]

    def new_caches(self) -> CacheSet:
        return CacheSet.empty(self.config.num_layers, self.config.num_kv_heads, self.config.head_dim)

    def new_ledger(self) -> CostLedger:
        return CostLedger(self.config.num_q_heads, self.config.num_kv_heads, self.config.head_dim)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in tensor_shapes(self.config):
            h.update(self.weights[name].tobytes())
        return h.hexdigest()


def init_random(config: ModelConfig) -> ModelBundle:
    """Seeded random weights.

    A single ``numpy.random.Generator(PCG64(config.seed))`` draws standard
    normals tensor by tensor in ``tensor_shapes`` order. Matrices are scaled
    by ``1/sqrt(fan_in)`` (fan_in = rows); the embedding table is left at
    unit scale and norm gains are ones (no draw).
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    weights = {}
    for name, shape in tensor_shapes(config).items():
        if len(shape) == 1:
            weights[name] = np.ones(shape, dtype=np.float32)
            continue
        draw = rng.standard_normal(shape)
        if name != "embed_tokens":
            draw = draw / math.sqrt(shape[0])
        weights[name] = draw.astype(np.float32)
    return ModelBundle(config, weights)


# ---------------------------------------------------------------------------
# on-disk format: config.json + weights.bin (little-endian f32) + manifest.json
# ---------------------------------------------------------------------------

def save_bundle(bundle: ModelBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    offset = 0
    tmp = out / "weights.bin.tmp"
    with open(tmp, "wb") as fh:
        for name, shape in tensor_shapes(bundle.config).items():
            arr = bundle.weights[name].astype("<f4", copy=False)
            fh.write(arr.tobytes())
            manifest[name] = {"offset": offset, "shape": list(shape)}
            offset += arr.size
    os.replace(tmp, out / "weights.bin")
    _write_json(out / "manifest.json", {"dtype": "float32-le", "total_floats": offset, "tensors": manifest})
    _write_json(out / "config.json", bundle.config.to_dict())
    return out


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        config = ModelConfig.from_dict(json.loads((path / "config.json").read_text()))
        manifest = json.loads((path / "manifest.json").read_text())
        raw = np.fromfile(path / "weights.bin", dtype="<f4")
    except FileNotFoundError as exc:
        raise BundleError(f"incomplete bundle at {path}: {exc.filename} missing") from exc
    expected = tensor_shapes(config)
    total = sum(int(np.prod(s)) for s in expected.values())
    if raw.size != total or manifest.get("total_floats") != total:
        raise BundleError(f"weights.bin holds {raw.size} floats, config implies {total}")
    weights = {}
    for name, shape in expected.items():
        entry = manifest["tensors"].get(name)
        if entry is None or tuple(entry["shape"]) != shape:
            raise BundleError(f"manifest entry for {name} missing or wrong shape")
        start = entry["offset"]
        size = int(np.prod(shape))
        if start < 0 or start + size > raw.size:
            raise BundleError(f"{name}: offset {start} out of bounds")
        weights[name] = raw[start:start + size].astype(np.float32).reshape(shape)
    return ModelBundle(config, weights)


def _write_json(path: Path, data) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class LayerActivations:
    """Hidden rows plus the Q/K/V the last layer produced for them.

    ``q`` is (len, h, d) and ``k``/``v`` are (len, h_kv, d), all after RoPE
    for ``k`` and ``q``; they are ``None`` straight after ``embed``.
    """

    hidden: np.ndarray
    positions: np.ndarray
    q: np.ndarray | None = None
    k: np.ndarray | None = None
    v: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.hidden.shape[0])

    def select_rows(self, indices) -> LayerActivations:
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda a: None if a is None else np.ascontiguousarray(a[idx])  # noqa: E731
        return LayerActivations(pick(self.hidden), pick(self.positions), pick(self.q), pick(self.k), pick(self.v))


def embed(tokens, bundle: ModelBundle, positions=None) -> LayerActivations:
    ids = np.asarray(list(tokens), dtype=np.int64)
    vocab = bundle.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise ValueError(f"token id {bad} outside vocabulary of size {vocab}")
    if positions is None:
        positions = np.arange(ids.size, dtype=np.int64)
    table = bundle.weights["embed_tokens"]
    hidden = np.ascontiguousarray(table[ids]).reshape(ids.size, bundle.config.model_dim)
    return LayerActivations(hidden=hidden, positions=np.asarray(positions, dtype=np.int64))


def _silu(x: np.ndarray) -> np.ndarray:
    e = np.exp(-x.astype(np.float64)).astype(np.float32)
    return (x / (np.float32(1) + e)).astype(np.float32)


def layer_forward(
    layer_index: int,
    acts: LayerActivations,
    cache: LayerKVCache,
    bundle: ModelBundle,
    ledger: CostLedger | None = None,
) -> LayerActivations:
    cfg = bundle.config
    n = len(acts)
    h, hkv, d = cfg.num_q_heads, cfg.num_kv_heads, cfg.head_dim
    pos = acts.positions
    w = lambda name: bundle.layer(layer_index, name)  # noqa: E731

    x = acts.hidden
    a = kernels.rmsnorm(x, w("attn_norm"), cfg.norm_eps)
    q = kernels.matmul(a, w("wq")).reshape(n, h, d)
    k = kernels.matmul(a, w("wk")).reshape(n, hkv, d)
    v = kernels.matmul(a, w("wv")).reshape(n, hkv, d)
    q = kernels.rope_apply(q, pos, cfg.rope_theta)
    k = kernels.rope_apply(k, pos, cfg.rope_theta)

    cache.append(k, v, pos)
    attn = kernels.causal_attention(q, cache.keys, cache.values, pos, cache.positions, 1.0 / math.sqrt(d))
    if ledger is not None:
        ledger.record_attention(layer_index, pos, cache.positions)
        ledger.record_weights(bundle.layer_weight_bytes(layer_index))

    x = x + kernels.matmul(attn.reshape(n, h * d), w("wo"))
    b = kernels.rmsnorm(x, w("mlp_norm"), cfg.norm_eps)
    gate = kernels.matmul(b, w("w_gate"))
    up = kernels.matmul(b, w("w_up"))
    x = x + kernels.matmul(_silu(gate) * up, w("w_down"))
    return LayerActivations(hidden=x.astype(np.float32), positions=pos, q=q, k=k, v=v)


def lm_head(acts: LayerActivations, bundle: ModelBundle) -> np.ndarray:
    """Logits (vocab_size,) for the last row: final RMSNorm then projection."""
    if len(acts) == 0:
        raise ValueError("lm_head needs at least one row")
    last = kernels.rmsnorm(acts.hidden[-1:], bundle.weights["final_norm"], bundle.config.norm_eps)
    return kernels.matmul(last, bundle.weights["lm_head"])[0]


def greedy(logits: np.ndarray) -> int:
    """Argmax; the smallest token id wins ties."""
    return int(np.argmax(logits))


def forward_all(tokens, bundle: ModelBundle, caches: CacheSet | None = None, ledger=None, positions=None):
    """Run every layer over ``tokens``; returns (final activations, caches)."""
    caches = bundle.new_caches() if caches is None else caches
    acts = embed(tokens, bundle, positions)
    for i in range(bundle.config.num_layers):
        acts = layer_forward(i, acts, caches[i], bundle, ledger)
    return acts, caches
