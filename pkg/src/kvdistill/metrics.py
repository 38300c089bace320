"""Metrics JSON (schema 1) for a generation run."""

from __future__ import annotations

import json
import os
from pathlib import Path

SCHEMA_VERSION = 1


def _stage_view(stage: dict) -> dict:
    return {k: v for k, v in stage.items()}


def to_metrics(result, deterministic: bool = False) -> dict:
    """Serialisable view of a ``GenerationResult``.

    With ``deterministic`` the timing block is dropped, so repeated runs with
    the same inputs produce byte-identical JSON.
    """
    cost = result.cost
    out = {
        "schema": SCHEMA_VERSION,
        "variant": result.variant,
        "config": {"model": result.model_config, "pipeline": result.pipeline_config},
        "n": result.prompt_len,
        "T": result.pipeline_config.get("max_new_tokens", len(result.tokens)),
        "first_token": result.first_token,
        "tokens": list(result.tokens),
        "stopped_on_eos": result.stopped_on_eos,
        "logits_checksums": list(result.logits_checksums),
        "cache_lengths_after_prefill": list(result.cache_lengths_after_prefill),
        "selection": {
            "stages": [
                {
                    "layer": s["layer"],
                    "k": s["k"],
                    "truncated": s["truncated"],
                    "original_positions": list(s["original_positions"]),
                }
                for s in result.selections
            ]
        },
        "cost": {
            "prompt": _stage_view(cost["prompt"]),
            "generation": _stage_view(cost["generation"]),
            "total_attention_macs": cost["total_attention_macs"],
            "layer_split": cost["layer_split"],
            "predictions": cost.get("predictions"),
            "audit": cost.get("audit"),
        },
    }
    if not deterministic:
        out["timing"] = {"wall_ms": round(cost.get("wall_ms", 0.0), 3)}
    return out


def dumps(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_atomic(path, text: str) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported metrics schema {data.get('schema')!r}")
    return data
