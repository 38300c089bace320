"""End-to-end inference procedures sharing one greedy generation loop.

Variants
--------
``allkv``
    Every layer over every prompt token; the correctness reference.
``promptdistill_basic``
    Select survivors after each scheduled layer, keep their hidden states and
    run the remaining layers on them only. Caches below the selection layer
    keep every prompt token.
``promptdistill`` / ``promptdistill_multi``
    As above, and the first ``truncation_count`` stages also gather the caches
    of every layer processed so far down to the survivors.
``gemfilter``
    Run layers 0..r on the full prompt, select, then discard everything but
    the selected token ids and re-run the whole model on them from layer 0
    with positions 0..k-1.

Survivors of a selective prefill keep their original absolute positions by
default, and generated tokens continue at ``n`` (the original prompt
length). ``positions="compact"`` relabels survivors 0..k-1 in the layers
above each selection instead; generated tokens still start at ``n``.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import costs
from .cache import CacheSet, truncate_prefix_layers
from .costs import CostLedger
from .model import ModelBundle, embed, forward_all, greedy, layer_forward, lm_head
from .selection import SelectionSchedule, select, validate_schedule

VARIANTS = costs.VARIANTS
POSITION_MODES = ("original", "compact")


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    variant: str
    schedule: SelectionSchedule | None = None
    max_new_tokens: int = 16
    eos_id: int | None = None
    positions: str = "original"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PipelineError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.max_new_tokens < 1:
            raise PipelineError("max_new_tokens must be >= 1")
        if self.positions not in POSITION_MODES:
            raise PipelineError(f"positions must be one of {POSITION_MODES}")
        if self.variant == "allkv":
            return
        if self.schedule is None:
            raise PipelineError(f"variant {self.variant} needs a selection schedule")
        if self.variant in ("gemfilter", "promptdistill", "promptdistill_basic") and not self.schedule.is_single_stage:
            raise PipelineError(f"variant {self.variant} takes a single-stage schedule")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "schedule": None if self.schedule is None else self.schedule.to_dict(),
            "max_new_tokens": self.max_new_tokens,
            "eos_id": self.eos_id,
            "positions": self.positions,
        }


@dataclass
class Prefill:
    first_token: int
    caches: CacheSet
    ledger: CostLedger
    logits: np.ndarray
    next_position: int
    selections: list[dict] = field(default_factory=list)


@dataclass
class GenerationResult:
    variant: str
    prompt_len: int
    tokens: list[int]
    first_token: int
    logits_checksums: list[str]
    cache_lengths_after_prefill: list[int]
    cost: dict
    selections: list[dict]
    vocab_size: int
    stopped_on_eos: bool = False
    model_config: dict = field(default_factory=dict)
    pipeline_config: dict = field(default_factory=dict)
    step_logits: list[np.ndarray] = field(default_factory=list, repr=False)
    ledger: CostLedger | None = field(default=None, repr=False)
    caches: CacheSet | None = field(default=None, repr=False)
    cache_dump: dict | None = field(default=None, repr=False)


def logits_checksum(logits: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(logits, dtype="<f4").tobytes()).hexdigest()[:16]


def _check_tokens(tokens) -> list[int]:
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise PipelineError("prompt must contain at least one token")
    return tokens


def prefill_allkv(tokens, bundle: ModelBundle, ledger: CostLedger | None = None) -> Prefill:
    tokens = _check_tokens(tokens)
    ledger = bundle.new_ledger() if ledger is None else ledger
    caches = bundle.new_caches()
    acts = embed(tokens, bundle)
    for i in range(bundle.config.num_layers):
        acts = layer_forward(i, acts, caches[i], bundle, ledger)
        ledger.observe_cache(caches.lengths())
    logits = lm_head(acts, bundle)
    return Prefill(greedy(logits), caches, ledger, logits, next_position=len(tokens))


def prefill_promptdistill(
    tokens,
    bundle: ModelBundle,
    schedule: SelectionSchedule,
    truncate: bool = True,
    positions: str = "original",
    ledger: CostLedger | None = None,
) -> Prefill:
    """Selective prefill; with ``truncate`` the first ``truncation_count`` stages prune caches."""
    tokens = _check_tokens(tokens)
    n = len(tokens)
    m = bundle.config.num_layers
    schedule = validate_schedule(schedule, m, n)
    ledger = bundle.new_ledger() if ledger is None else ledger
    ledger.set_phase(costs.PHASE_FULL)
    caches = bundle.new_caches()
    acts = embed(tokens, bundle)
    original = np.arange(n, dtype=np.int64)
    selections = []
    stage = 0
    for i in range(m):
        acts = layer_forward(i, acts, caches[i], bundle, ledger)
        ledger.observe_cache(caches.lengths())
        if stage < len(schedule.layers) and i == schedule.layers[stage]:
            outcome = select(
                acts.q[-1],
                caches[i].keys,
                schedule.token_counts[stage],
                force_include_last=schedule.force_include_last,
                aggregation=schedule.aggregation,
                positions=original,
            )
            acts = acts.select_rows(outcome.indices)
            original = original[outcome.indices]
            truncated = truncate and stage < schedule.truncation_count
            if truncated:
                truncate_prefix_layers(caches, i, outcome.indices)
                ledger.observe_cache(caches.lengths())
            if positions == "compact":
                acts.positions = np.arange(len(acts), dtype=np.int64)
            selections.append({
                "layer": i,
                "k": len(outcome.indices),
                "indices": outcome.indices,
                "original_positions": outcome.original_positions,
                "truncated": truncated,
                "scores": outcome.per_token_scores,
            })
            stage += 1
            ledger.set_phase(costs.PHASE_SELECTED)
    logits = lm_head(acts, bundle)
    return Prefill(greedy(logits), caches, ledger, logits, next_position=n, selections=selections)


def generate_loop(first_token: int, caches: CacheSet, bundle: ModelBundle, T: int,
                  ledger: CostLedger | None = None, start_position: int = 0,
                  eos_id: int | None = None):
    """Greedy decode ``T - 1`` more tokens; returns (tokens, per-step logits, stopped_on_eos).

    The token fed at step ``s`` (1-based) sits at ``start_position + s - 1``.
    The returned logits cover the decode steps only.
    """
    ledger = bundle.new_ledger() if ledger is None else ledger
    ledger.set_phase(costs.PHASE_DECODE)
    tokens = [int(first_token)]
    step_logits = []
    if eos_id is not None and tokens[-1] == eos_id:
        return tokens, step_logits, True
    for s in range(1, T):
        acts = embed([tokens[-1]], bundle, positions=[start_position + s - 1])
        for i in range(bundle.config.num_layers):
            acts = layer_forward(i, acts, caches[i], bundle, ledger)
        ledger.observe_cache(caches.lengths())
        logits = lm_head(acts, bundle)
        step_logits.append(logits)
        tokens.append(greedy(logits))
        if eos_id is not None and tokens[-1] == eos_id:
            return tokens, step_logits, True
    return tokens, step_logits, False


def run_gemfilter(tokens, bundle: ModelBundle, r: int, k: int, T: int,
                  force_include_last: bool = True, aggregation: str = "softmax_sum",
                  eos_id: int | None = None) -> GenerationResult:
    schedule = SelectionSchedule.single(r, k, force_include_last=force_include_last, aggregation=aggregation)
    cfg = PipelineConfig("gemfilter", schedule, T, eos_id)
    return run_pipeline(tokens, bundle, cfg)


def _prefill_gemfilter(tokens, bundle: ModelBundle, schedule: SelectionSchedule) -> Prefill:
    tokens = _check_tokens(tokens)
    schedule = validate_schedule(schedule, bundle.config.num_layers, len(tokens))
    r, k = schedule.layers[0], schedule.token_counts[0]
    ledger = bundle.new_ledger()
    ledger.set_phase(costs.PHASE_FULL)
    scratch = bundle.new_caches()
    acts = embed(tokens, bundle)
    for i in range(r + 1):
        acts = layer_forward(i, acts, scratch[i], bundle, ledger)
        ledger.observe_cache(scratch.lengths())
    outcome = select(acts.q[-1], scratch[r].keys, k, schedule.force_include_last, schedule.aggregation)
    del scratch, acts  # phase-1 state is discarded, only the ids survive
    kept = [tokens[i] for i in outcome.indices]

    ledger.set_phase(costs.PHASE_SELECTED)
    caches = bundle.new_caches()
    acts = embed(kept, bundle)
    for i in range(bundle.config.num_layers):
        acts = layer_forward(i, acts, caches[i], bundle, ledger)
        ledger.observe_cache(caches.lengths())
    logits = lm_head(acts, bundle)
    selection = {
        "layer": r,
        "k": len(outcome.indices),
        "indices": outcome.indices,
        "original_positions": outcome.original_positions,
        "truncated": False,
        "scores": outcome.per_token_scores,
    }
    return Prefill(greedy(logits), caches, ledger, logits, next_position=len(kept), selections=[selection])


def prefill(tokens, bundle: ModelBundle, config: PipelineConfig) -> Prefill:
    if config.variant == "allkv":
        return prefill_allkv(tokens, bundle)
    if config.variant == "gemfilter":
        return _prefill_gemfilter(tokens, bundle, config.schedule)
    truncate = config.variant != "promptdistill_basic"
    return prefill_promptdistill(tokens, bundle, config.schedule, truncate, config.positions)


def predict_for(config: PipelineConfig, bundle: ModelBundle, n: int):
    """Closed-form costs for this run, using the clamped schedule."""
    cfg = bundle.config
    common = dict(
        m=cfg.num_layers, h=cfg.num_q_heads, n=n, d=cfg.head_dim, t=config.max_new_tokens,
        h_kv=cfg.num_kv_heads, w=bundle.layer_weight_bytes(0),
    )
    if config.variant == "allkv":
        return costs.predict("allkv", **common)
    s = validate_schedule(config.schedule, cfg.num_layers, n)
    if config.variant == "promptdistill_multi":
        return costs.predict(config.variant, r_vec=list(s.layers), k_vec=list(s.token_counts),
                             tt=s.truncation_count, **common)
    return costs.predict(config.variant, r=s.layers[0], k=s.token_counts[0], **common)


def run_pipeline(tokens, bundle: ModelBundle, config: PipelineConfig) -> GenerationResult:
    """Prefill, generate, and audit measured costs against the closed forms."""
    tokens = _check_tokens(tokens)
    started = time.perf_counter()
    pre = prefill(tokens, bundle, config)
    cache_lengths = pre.caches.lengths()
    prefill_dump = pre.caches.to_dump()
    generated, step_logits, stopped = generate_loop(
        pre.first_token, pre.caches, bundle, config.max_new_tokens, pre.ledger,
        start_position=pre.next_position, eos_id=config.eos_id,
    )
    wall_ms = (time.perf_counter() - started) * 1000.0
    snapshot = pre.ledger.snapshot()
    cost = dict(snapshot)
    # early EOS breaks the fixed-T assumption of the closed forms
    if not stopped:
        prediction = predict_for(config, bundle, len(tokens))
        cost["predictions"] = {p.stage: p.to_dict() for p in prediction}
        cost["audit"] = costs.audit(snapshot, prediction)
    cost["wall_ms"] = wall_ms
    logits = [pre.logits] + step_logits
    return GenerationResult(
        variant=config.variant,
        prompt_len=len(tokens),
        tokens=generated,
        first_token=pre.first_token,
        logits_checksums=[logits_checksum(x) for x in logits],
        cache_lengths_after_prefill=cache_lengths,
        cost=cost,
        selections=pre.selections,
        vocab_size=bundle.config.vocab_size,
        stopped_on_eos=stopped,
        model_config=bundle.config.to_dict(),
        pipeline_config=config.to_dict(),
        step_logits=logits,
        ledger=pre.ledger,
        caches=pre.caches,
        cache_dump={"after_prefill": prefill_dump, "final": pre.caches.to_dump()},
    )


def generate_recompute(tokens, bundle: ModelBundle, T: int):
    """Cache-free greedy generation: every step re-runs the full sequence."""
    seq = _check_tokens(tokens)
    out, all_logits = [], []
    for _ in range(T):
        acts, _ = forward_all(seq, bundle)
        logits = lm_head(acts, bundle)
        all_logits.append(logits)
        out.append(greedy(logits))
        seq = seq + [out[-1]]
    return out, all_logits


_COST_FIELDS = ("attention_score_macs", "attention_value_macs", "cache_scalars_peak",
                "cache_scalars_final", "weight_bytes_touched")


def compare_runs(a, b) -> dict:
    """Structured difference between two runs (results or metrics dicts).

    ``diff`` is empty when the runs agree on tokens, logits checksums, cache
    lengths and every cost counter.
    """
    from .metrics import to_metrics

    ma = a if isinstance(a, dict) else to_metrics(a)
    mb = b if isinstance(b, dict) else to_metrics(b)
    if ma["config"]["model"]["vocab_size"] != mb["config"]["model"]["vocab_size"]:
        raise PipelineError("cannot compare runs over different vocabularies")
    ta, tb = ma["tokens"], mb["tokens"]
    prefix = 0
    while prefix < min(len(ta), len(tb)) and ta[prefix] == tb[prefix]:
        prefix += 1
    diff: dict = {}
    if ma["first_token"] != mb["first_token"]:
        diff["first_token"] = {"a": ma["first_token"], "b": mb["first_token"]}
    if ta != tb:
        diff["tokens"] = {"common_prefix": prefix, "a_len": len(ta), "b_len": len(tb)}
    if ma["logits_checksums"] != mb["logits_checksums"]:
        first_bad = next((i for i, (x, y) in enumerate(zip(ma["logits_checksums"], mb["logits_checksums"])) if x != y),
                         min(len(ma["logits_checksums"]), len(mb["logits_checksums"])))
        diff["logits"] = {"first_differing_step": first_bad}
    la, lb = ma["cache_lengths_after_prefill"], mb["cache_lengths_after_prefill"]
    if la != lb:
        diff["cache_lengths_after_prefill"] = {
            "a": la, "b": lb, "delta": [y - x for x, y in zip(la, lb)],
        }
    cost_delta = {}
    for stage in ("prompt", "generation"):
        for key in _COST_FIELDS:
            delta = mb["cost"][stage][key] - ma["cost"][stage][key]
            if delta:
                cost_delta.setdefault(stage, {})[key] = delta
    if cost_delta:
        diff["cost_delta_b_minus_a"] = cost_delta
    return {
        "identical": not diff,
        "first_token_equal": ma["first_token"] == mb["first_token"],
        "common_prefix": prefix,
        "diff": diff,
    }


def select_at_layer(tokens, bundle: ModelBundle, layer: int, k: int,
                    force_include_last: bool = True, aggregation: str = "softmax_sum"):
    """Run layers 0..layer over the full prompt and return the selection there."""
    tokens = _check_tokens(tokens)
    if not 0 <= layer < bundle.config.num_layers:
        raise PipelineError(f"layer {layer} outside 0..{bundle.config.num_layers - 1}")
    caches = bundle.new_caches()
    acts = embed(tokens, bundle)
    for i in range(layer + 1):
        acts = layer_forward(i, acts, caches[i], bundle)
    return select(acts.q[-1], caches[layer].keys, k, force_include_last, aggregation)
