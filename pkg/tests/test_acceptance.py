"""Acceptance suite: one test per criterion on the m=8, h=4, h_kv=2, d=16 model.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary lists one PASS/FAIL line per criterion.
"""

import json

import numpy as np
import pytest

from kvdistill import tokenizer
from kvdistill.cli import main
from kvdistill.costs import THETA, tri
from kvdistill.model import ModelConfig, init_random, save_bundle
from kvdistill.needle import PlantedNeedleSpec, oracle_bundle, random_needle, synth_prompt
from kvdistill.pipelines import (
    PipelineConfig,
    generate_recompute,
    prefill_promptdistill,
    run_pipeline,
    select_at_layer,
)
from kvdistill.selection import ScheduleError, SelectionSchedule, validate_schedule

from .conftest import acceptance_config, random_prompt

M, H, HKV, D, VOCAB = 8, 4, 2, 16, 512
N, T = 512, 16

criterion = pytest.mark.criterion


@pytest.fixture(scope="module")
def models():
    return {seed: init_random(acceptance_config(seed)) for seed in range(3)}


def run(bundle, tokens, variant, layers=None, counts=None, tt=1, steps=T):
    schedule = None if layers is None else SelectionSchedule(tuple(layers), tuple(counts), tt)
    return run_pipeline(tokens, bundle, PipelineConfig(variant, schedule, steps))


@criterion(1, "select-all promptdistill equals allkv (9 cases)")
def test_select_all_equivalence(models):
    for seed, bundle in models.items():
        tokens = random_prompt(N, VOCAB, 100 + seed)
        base = run(bundle, tokens, "allkv")
        for r in (0, 3, 7):
            res = run(bundle, tokens, "promptdistill", [r], [N])
            assert res.tokens == base.tokens, (seed, r)
            for a, b in zip(res.step_logits, base.step_logits):
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-5)
                assert a.tobytes() == b.tobytes(), (seed, r)


@criterion(2, "first token invariant under cache truncation (10 prompts)")
def test_first_token_invariance(models):
    sched = SelectionSchedule.single(4, 64)
    for seed in range(10):
        tokens = random_prompt(N, VOCAB, 200 + seed)
        a = prefill_promptdistill(tokens, models[0], sched, truncate=True)
        b = prefill_promptdistill(tokens, models[0], sched, truncate=False)
        assert a.first_token == b.first_token
        np.testing.assert_allclose(a.logits, b.logits, rtol=0, atol=1e-6)


@criterion(3, "per-layer cache lengths follow the truncation trace")
def test_cache_shape_law(models):
    tokens = random_prompt(N, VOCAB, 300)
    bundle = models[0]
    single = SelectionSchedule.single(4, 64)
    assert prefill_promptdistill(tokens, bundle, single).caches.lengths() == [64] * 8
    assert prefill_promptdistill(tokens, bundle, single, truncate=False).caches.lengths() == [512] * 5 + [64] * 3
    multi2 = SelectionSchedule((2, 4), (128, 64), 2)
    assert prefill_promptdistill(tokens, bundle, multi2).caches.lengths() == [64] * 8
    multi1 = SelectionSchedule((2, 4), (128, 64), 1)
    assert prefill_promptdistill(tokens, bundle, multi1).caches.lengths() == [128] * 5 + [64] * 3


def closed_form_prompt_macs(variant, n, r, k, rv, kv):
    full = H * D * tri(n)
    if variant == "allkv":
        return M * full
    if variant in ("promptdistill", "promptdistill_basic"):
        return (r + 1) * full + (M - r - 1) * H * D * tri(k)
    if variant == "gemfilter":
        return (r + 1) * full + M * H * D * tri(k)
    # two stages: layers 0..rv0 on n, rv0+1..rv1 on kv0, rest on kv1
    return ((rv[0] + 1) * full + (rv[1] - rv[0]) * H * D * tri(kv[0])
            + (M - rv[1] - 1) * H * D * tri(kv[1]))


@criterion(4, "prompt-stage MACs equal the closed forms for all variants")
@pytest.mark.parametrize("n,r,k", [(256, 2, 32), (512, 4, 64), (1024, 4, 128)])
def test_prompt_cost_audit(models, n, r, k):
    tokens = random_prompt(n, VOCAB, 400 + n)
    rv, kv = [r // 2, r], [2 * k, k]
    for variant, layers, counts, tt in [
        ("allkv", None, None, 1),
        ("promptdistill", [r], [k], 1),
        ("promptdistill_basic", [r], [k], 1),
        ("gemfilter", [r], [k], 1),
        ("promptdistill_multi", rv, kv, 2),
    ]:
        res = run(models[0], tokens, variant, layers, counts, tt, steps=2)
        measured = res.cost["prompt"]["attention_score_macs"]
        assert measured == closed_form_prompt_macs(variant, n, r, k, rv, kv), variant
        assert measured == res.cost["predictions"]["prompt"]["attention_score_macs"], variant
        assert res.cost["audit"]["ok"], variant
    assert THETA[("promptdistill", "prompt")] == "Θ(rhn²d)"
    assert THETA[("promptdistill_multi", "prompt")] == "Θ(r'hn²d+(r−r')hk'²d)"


def total_macs(res):
    return res.cost["total_attention_macs"]


@criterion(5, "total MACs: promptdistill < gemfilter < allkv, gap is the rerun term")
def test_efficiency_ordering(models):
    tokens = random_prompt(N, VOCAB, 500)
    r, k = 4, 64
    pd = run(models[0], tokens, "promptdistill", [r], [k])
    gf = run(models[0], tokens, "gemfilter", [r], [k])
    full = run(models[0], tokens, "allkv")
    assert total_macs(pd) < total_macs(gf) < total_macs(full)
    assert total_macs(gf) - total_macs(pd) == (r + 1) * H * D * tri(k)


@criterion(6, "no-truncation generation gap is exact")
def test_no_truncation_gap(models):
    tokens = random_prompt(N, VOCAB, 600)
    r, k = 4, 64
    basic = run(models[0], tokens, "promptdistill_basic", [r], [k])
    trunc = run(models[0], tokens, "promptdistill", [r], [k])
    gap = basic.cost["generation"]["attention_score_macs"] - trunc.cost["generation"]["attention_score_macs"]
    assert gap == sum((r + 1) * H * D * (N - k) for _ in range(T - 1))


@criterion(7, "planted needle recovered exactly, 100 seeds x k x depth")
def test_planted_needle_recovery():
    config = ModelConfig.build(num_layers=M, num_q_heads=H, num_kv_heads=HKV, head_dim=D, vocab_size=VOCAB)
    failures = []
    for k in (4, 16):
        for seed in range(100):
            needle = random_needle(k, VOCAB, seed)
            bundle = oracle_bundle(config, needle, N)
            for depth in (0, 25, 50, 75, 100):
                spec = PlantedNeedleSpec(N, needle, depth, seed)
                tokens, span = synth_prompt(spec, VOCAB)
                got = select_at_layer(tokens, bundle, 1, k, force_include_last=False).indices
                if got != span:
                    failures.append((k, seed, depth))
    assert not failures, f"{len(failures)} misses, first {failures[:5]}"


@criterion(8, "cached generation equals full recompute (5 seeds)")
def test_cache_memoization(models):
    bundle = models[0]
    for seed in range(5):
        tokens = random_prompt(32, VOCAB, 800 + seed)
        res = run(bundle, tokens, "allkv", steps=8)
        ref_tokens, ref_logits = generate_recompute(tokens, bundle, 8)
        assert res.tokens == ref_tokens
        for a, b in zip(res.step_logits, ref_logits):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-5)


@criterion(9, "published schedules validate, malformed ones are rejected")
def test_schedule_fixtures():
    single = validate_schedule(SelectionSchedule.single(13, 1024), 32, 16384)
    assert single.layers == (13,) and single.token_counts == (1024,)
    three = validate_schedule(SelectionSchedule((5, 8, 13), (16384, 8192, 1024), 3), 32, 16384)
    assert three.token_counts == (16384, 8192, 1024) and not three.clamped
    with pytest.raises(ScheduleError):
        validate_schedule(SelectionSchedule((8, 5, 13), (16384, 8192, 1024), 1), 32, 16384)
    with pytest.raises(ScheduleError):
        validate_schedule(SelectionSchedule((5, 8, 13), (8192, 16384, 1024), 1), 32, 16384)


@criterion(10, "generate is byte-identical over 20 repetitions")
def test_determinism(tmp_path, capsys):
    save_bundle(init_random(acceptance_config(0)), tmp_path / "m")
    (tmp_path / "p.txt").write_text(tokenizer.format_id_file(random_prompt(N, VOCAB, 1000)))
    argv = ["generate", "--model", str(tmp_path / "m"), "--prompt-ids", str(tmp_path / "p.txt"),
            "--variant", "promptdistill", "--layers-select", "4", "--topk", "64",
            "--max-new-tokens", str(T), "--deterministic"]
    outputs = set()
    for _ in range(20):
        assert main(argv) == 0
        outputs.add(capsys.readouterr().out)
    assert len(outputs) == 1
    assert json.loads(outputs.pop())["n"] == N


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
