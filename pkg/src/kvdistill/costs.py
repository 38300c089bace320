"""Attention cost instrumentation and closed-form predictions.

Counting conventions used everywhere in this module:

* Causal counting. A query row attends to every cached key whose position is
  not after its own, so a fresh prefill of ``n`` rows in one layer costs
  ``h * d * n(n+1)/2`` score MACs (and the same number of value MACs).
* One decode step against a cache of ``c`` entries costs ``h * d * (c + 1)``.
* Cache size is measured in stored key+value scalars. The physical figure uses
  ``h_kv``; the ``_all_heads`` figure uses ``h`` (query heads) and so
  ignores grouped-query sharing.
* Stage boundary: ``prompt`` covers everything up to and including the pass
  that produces the first token; ``generation`` covers the ``t - 1`` decode
  steps. The ledger also keeps an alternative split (``layer_split``) where
  work on the already-selected tokens counts as generation, so a rerun over
  the selected ids lands in the generation stage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

PHASE_FULL = "prompt_full"  # all prompt tokens, before the first selection
PHASE_SELECTED = "prompt_selected"  # prefill work on selected tokens only
PHASE_DECODE = "generation"
PHASES = (PHASE_FULL, PHASE_SELECTED, PHASE_DECODE)

VARIANTS = ("allkv", "promptdistill_basic", "promptdistill", "promptdistill_multi", "gemfilter")

COUNTERS = (
    "attention_score_macs",
    "attention_value_macs",
    "cache_scalars_peak",
    "cache_scalars_final",
    "weight_bytes_touched",
)


@dataclass
class _PhaseTotals:
    score_macs: dict = field(default_factory=dict)  # layer -> macs
    weight_bytes: int = 0
    cache_peak: int | None = None  # entries (token rows summed over layers)
    cache_final: int | None = None


class CostLedger:
    """Exact counters for one generation run.

    Call ``set_phase`` when the pipeline crosses a boundary, ``observe_cache``
    after every cache mutation. ``layer_forward`` calls ``record_attention``
    and ``record_weights``.
    """

    def __init__(self, num_heads: int, num_kv_heads: int, head_dim: int):
        self.num_heads = num_heads
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.phase = PHASE_FULL
        self._phases = {p: _PhaseTotals() for p in PHASES}

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown ledger phase {phase!r}")
        self.phase = phase

    def record_attention(self, layer: int, query_positions, key_positions) -> int:
        """Book the attended (query, key) pairs of one attention call; returns MACs."""
        kpos = np.asarray(key_positions)
        qpos = np.asarray(query_positions)
        pairs = int(np.searchsorted(kpos, qpos, side="right").sum())
        macs = self.num_heads * self.head_dim * pairs
        bucket = self._phases[self.phase].score_macs
        bucket[layer] = bucket.get(layer, 0) + macs
        return macs

    def record_weights(self, nbytes: int) -> None:
        self._phases[self.phase].weight_bytes += int(nbytes)

    def observe_cache(self, lengths) -> None:
        """Record the current per-layer cache lengths (entries, not scalars)."""
        total = int(sum(lengths))
        tot = self._phases[self.phase]
        tot.cache_final = total
        tot.cache_peak = total if tot.cache_peak is None else max(tot.cache_peak, total)

    def _scalars(self, entries: int, heads: int) -> int:
        return 2 * entries * heads * self.head_dim

    def _combine(self, phases) -> dict:
        per_layer: dict[int, int] = {}
        weight_bytes = 0
        peak = None
        final = None
        for p in phases:
            tot = self._phases[p]
            for layer, macs in tot.score_macs.items():
                per_layer[layer] = per_layer.get(layer, 0) + macs
            weight_bytes += tot.weight_bytes
            if tot.cache_peak is not None:
                peak = tot.cache_peak if peak is None else max(peak, tot.cache_peak)
                final = tot.cache_final
        macs = sum(per_layer.values())
        peak = peak or 0
        final = final or 0
        return {
            "attention_score_macs": macs,
            # one value MAC per (attended pair, head, channel), same as scores
            "attention_value_macs": macs,
            "cache_scalars_peak": self._scalars(peak, self.num_kv_heads),
            "cache_scalars_final": self._scalars(final, self.num_kv_heads),
            "cache_scalars_peak_all_heads": self._scalars(peak, self.num_heads),
            "cache_scalars_final_all_heads": self._scalars(final, self.num_heads),
            "weight_bytes_touched": weight_bytes,
            "layers": [per_layer[k] for k in sorted(per_layer)],
        }

    def stage(self, name: str) -> dict:
        if name == "prompt":
            return self._combine((PHASE_FULL, PHASE_SELECTED))
        if name == "generation":
            return self._combine((PHASE_DECODE,))
        raise ValueError(f"unknown stage {name!r}")

    def snapshot(self) -> dict:
        prompt, generation = self.stage("prompt"), self.stage("generation")
        split_prompt = self._combine((PHASE_FULL,))
        split_gen = self._combine((PHASE_SELECTED, PHASE_DECODE))
        return {
            "prompt": prompt,
            "generation": generation,
            "total_attention_macs": prompt["attention_score_macs"]
            + generation["attention_score_macs"],
            "layer_split": {
                "prompt": {k: split_prompt[k] for k in ("attention_score_macs", "cache_scalars_peak_all_heads")},
                "generation": {k: split_gen[k] for k in ("attention_score_macs", "cache_scalars_peak_all_heads")},
            },
        }


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

THETA = {
    ("allkv", "prompt"): "Θ(mhn²d)",
    ("allkv", "generation"): "Θ(mh(nt+t²)d)",
    ("gemfilter", "prompt"): "Θ(rhn²d)",
    ("gemfilter", "generation"): "Θ(mh(k²+t²)d)",
    ("promptdistill", "prompt"): "Θ(rhn²d)",
    ("promptdistill", "generation"): "Θ(mh(k²+t²)d − rhk²d)",
    ("promptdistill_basic", "prompt"): "Θ(rhn²d)",
    ("promptdistill_basic", "generation"): "Θ(mh(k²+t²)d + rh(nt−kt−k²)d)",
    ("promptdistill_multi", "prompt"): "Θ(r'hn²d+(r−r')hk'²d)",
    ("promptdistill_multi", "generation"): "Θ(mh(k²+t²)d − rhk²d)",
}

TABLE1_MEMORY = {
    ("allkv", "prompt"): "mw + 2mhnd",
    ("allkv", "generation"): "mw + 2mh(n + t)d",
    ("gemfilter", "prompt"): "rw + 2hnd",
    ("gemfilter", "generation"): "mw + 2mh(k + t)d",
    ("promptdistill", "prompt"): "rw + 2rhnd",
    ("promptdistill", "generation"): "mw + 2mh(k + t)d",
    ("promptdistill_basic", "prompt"): "rw + 2rhnd",
    ("promptdistill_basic", "generation"): "mw+2mh(k+t)d+2rh(n-k)d",
    ("promptdistill_multi", "prompt"): "max{r'w+2r'hnd, rw+2rhk'd}",
    ("promptdistill_multi", "generation"): "mw + 2mh(k + t)d",
}


@dataclass
class CostPrediction:
    variant: str
    stage: str
    attention_score_macs: int
    attention_value_macs: int
    cache_scalars_peak: int
    cache_scalars_final: int
    cache_scalars_peak_all_heads: int
    cache_scalars_final_all_heads: int
    weight_bytes_touched: int | None
    layers: list[int]
    theta: str
    table1_memory: str

    def to_dict(self) -> dict:
        return asdict(self)


def tri(x: int) -> int:
    """Causal pair count for x rows attending among themselves."""
    return x * (x + 1) // 2


def _normalize(variant, r, k, tt, r_vec, k_vec):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if variant == "allkv":
        return [], [], 0
    if variant == "promptdistill_multi":
        if r_vec is None or k_vec is None:
            r_vec, k_vec = [r], [k]
        r_vec, k_vec = list(r_vec), list(k_vec)
        if len(r_vec) != len(k_vec) or not r_vec:
            raise ValueError("r_vec and k_vec must be non-empty and equally long")
        return r_vec, k_vec, tt if tt is not None else len(r_vec)
    if r is None or k is None:
        if r_vec is not None and k_vec is not None and len(r_vec) == 1:
            r, k = r_vec[0], k_vec[0]
        else:
            raise ValueError(f"variant {variant} needs a single (r, k)")
    return [r], [k], 1


def predict(
    variant: str,
    m: int,
    h: int,
    n: int,
    d: int,
    r: int | None = None,
    k: int | None = None,
    t: int = 1,
    tt: int | None = None,
    k_vec=None,
    r_vec=None,
    h_kv: int | None = None,
    w: int | None = None,
) -> tuple[CostPrediction, CostPrediction]:
    """Exact (prompt, generation) costs for one run.

    ``r`` is a 0-based layer index (layers 0..r see every prompt token),
    ``t`` is the number of generated tokens including the first, so the
    generation stage has ``t - 1`` decode steps. ``w`` is the weight bytes
    of one layer; when omitted weight traffic is not predicted.
    """
    r_vec, k_vec, tt = _normalize(variant, r, k, tt, r_vec, k_vec)
    h_kv = h if h_kv is None else h_kv
    unit = h * d
    steps = t - 1

    if variant == "allkv":
        prompt_layers = [unit * tri(n)] * m
        cache_lengths = [n] * m
        peak_entries = m * n
        prompt_weights = m
    elif variant == "gemfilter":
        (r0,), (k0,) = r_vec, k_vec
        # phase 1 over layers 0..r, then a full re-run on the k selected ids
        prompt_layers = [unit * tri(n) + unit * tri(k0) if j <= r0 else unit * tri(k0) for j in range(m)]
        cache_lengths = [k0] * m
        peak_entries = max((r0 + 1) * n, m * k0)
        prompt_weights = r0 + 1 + m
    elif variant in ("promptdistill", "promptdistill_basic"):
        (r0,), (k0,) = r_vec, k_vec
        prompt_layers = [unit * tri(n) if j <= r0 else unit * tri(k0) for j in range(m)]
        if variant == "promptdistill":
            cache_lengths = [k0] * m
            peak_entries = max((r0 + 1) * n, m * k0)
        else:
            cache_lengths = [n if j <= r0 else k0 for j in range(m)]
            peak_entries = sum(cache_lengths)
        prompt_weights = m
    else:
        active = _active_lengths(m, n, r_vec, k_vec)
        prompt_layers = [unit * tri(a) for a in active]
        cache_lengths, peak_entries = _multi_cache_trace(m, active, r_vec, k_vec, tt)
        prompt_weights = m

    prompt_macs = sum(prompt_layers)
    gen_layers = [unit * (steps * length + tri(steps)) for length in cache_lengths]
    gen_macs = sum(gen_layers)
    final_prompt = sum(cache_lengths)
    final_gen = final_prompt + m * steps

    def scal(entries, heads):
        return 2 * entries * heads * d

    prompt = CostPrediction(
        variant=variant,
        stage="prompt",
        attention_score_macs=prompt_macs,
        attention_value_macs=prompt_macs,
        cache_scalars_peak=scal(peak_entries, h_kv),
        cache_scalars_final=scal(final_prompt, h_kv),
        cache_scalars_peak_all_heads=scal(peak_entries, h),
        cache_scalars_final_all_heads=scal(final_prompt, h),
        weight_bytes_touched=None if w is None else prompt_weights * w,
        layers=prompt_layers,
        theta=THETA[(variant, "prompt")],
        table1_memory=TABLE1_MEMORY[(variant, "prompt")],
    )
    generation = CostPrediction(
        variant=variant,
        stage="generation",
        attention_score_macs=gen_macs,
        attention_value_macs=gen_macs,
        cache_scalars_peak=scal(final_gen if steps else 0, h_kv),
        cache_scalars_final=scal(final_gen if steps else 0, h_kv),
        cache_scalars_peak_all_heads=scal(final_gen if steps else 0, h),
        cache_scalars_final_all_heads=scal(final_gen if steps else 0, h),
        weight_bytes_touched=None if w is None else steps * m * w,
        layers=gen_layers,
        theta=THETA[(variant, "generation")],
        table1_memory=TABLE1_MEMORY[(variant, "generation")],
    )
    return prompt, generation


def _active_lengths(m, n, r_vec, k_vec) -> list[int]:
    """Rows processed by each layer during a (multi-stage) selective prefill."""
    lengths = []
    current = n
    stage = 0
    for j in range(m):
        lengths.append(current)
        if stage < len(r_vec) and j == r_vec[stage]:
            current = min(k_vec[stage], current)
            stage += 1
    return lengths


def _multi_cache_trace(m, active, r_vec, k_vec, tt):
    """Per-layer cache lengths after prefill, and the peak total during it."""
    lengths = [0] * m
    peak = 0
    stage = 0
    for j in range(m):
        lengths[j] = active[j]
        peak = max(peak, sum(lengths))
        if stage < len(r_vec) and j == r_vec[stage]:
            if stage < tt:
                kept = min(k_vec[stage], active[j])
                for i in range(j + 1):
                    lengths[i] = kept
            stage += 1
    return lengths, peak


def audit(ledger_snapshot: dict, prediction: tuple[CostPrediction, CostPrediction]) -> dict:
    """Compare measured counters with predictions, exactly.

    Mismatches are reported (with the per-layer breakdown), never raised.
    """
    report = {"ok": True, "stages": {}}
    for pred in prediction:
        measured = ledger_snapshot[pred.stage]
        rows = {}
        for counter in COUNTERS:
            expected = getattr(pred, counter)
            if expected is None:
                continue
            got = measured[counter]
            rows[counter] = {"measured": got, "predicted": expected, "match": got == expected}
            if got != expected:
                report["ok"] = False
        if not all(row["match"] for row in rows.values()):
            rows["layers"] = {"measured": measured["layers"], "predicted": pred.layers}
        report["stages"][pred.stage] = rows
    return report
