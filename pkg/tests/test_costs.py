import pytest

from kvdistill.costs import CostLedger, audit, predict, tri

from .oracles import causal_pairs

M, H, D, HKV = 8, 4, 16, 2


def enumerate_prompt_macs(active_lengths):
    return sum(H * D * causal_pairs(n) for n in active_lengths)


def enumerate_generation_macs(cache_lengths, t):
    total = 0
    for step in range(1, t):
        for length in cache_lengths:
            total += H * D * (length + step)
    return total


def test_allkv_prompt_example():
    prompt, _ = predict("allkv", m=M, h=H, n=512, d=D)
    assert prompt.attention_score_macs == 67_239_936
    assert prompt.theta == "Θ(mhn²d)"


def test_promptdistill_prompt_example():
    prompt, _ = predict("promptdistill", m=M, h=H, n=512, d=D, r=4, k=64)
    assert prompt.attention_score_macs == 42_024_960 + 399_360


def test_multistage_prompt_example():
    prompt, _ = predict("promptdistill_multi", m=M, h=H, n=512, d=D, r_vec=[2, 4], k_vec=[128, 64], tt=2)
    assert prompt.attention_score_macs == enumerate_prompt_macs([512] * 3 + [128] * 2 + [64] * 3)
    assert prompt.attention_score_macs == 26_671_104


@pytest.mark.parametrize("n,r,k,t", [(64, 2, 8, 5), (40, 0, 40, 3), (33, 7, 5, 1)])
def test_all_variants_against_enumeration(n, r, k, t):
    cases = {
        "allkv": ([n] * M, [n] * M),
        "promptdistill": ([n if j <= r else k for j in range(M)], [k] * M),
        "promptdistill_basic": ([n if j <= r else k for j in range(M)], [n if j <= r else k for j in range(M)]),
        "gemfilter": ([n] * (r + 1) + [k] * M, [k] * M),
    }
    for variant, (active, caches) in cases.items():
        prompt, gen = predict(variant, m=M, h=H, n=n, d=D, r=r, k=k, t=t)
        assert prompt.attention_score_macs == enumerate_prompt_macs(active), variant
        assert gen.attention_score_macs == enumerate_generation_macs(caches, t), variant


def test_generation_gap_basic_vs_truncated():
    n, r, k, t = 512, 4, 64, 16
    _, basic = predict("promptdistill_basic", m=M, h=H, n=n, d=D, r=r, k=k, t=t)
    _, trunc = predict("promptdistill", m=M, h=H, n=n, d=D, r=r, k=k, t=t)
    assert basic.attention_score_macs - trunc.attention_score_macs == sum(
        (r + 1) * H * D * (n - k) for _ in range(t - 1)
    )


def test_gemfilter_minus_promptdistill_is_rerun_term():
    n, r, k, t = 512, 4, 64, 16
    g = predict("gemfilter", m=M, h=H, n=n, d=D, r=r, k=k, t=t)
    p = predict("promptdistill", m=M, h=H, n=n, d=D, r=r, k=k, t=t)
    total = lambda pair: sum(x.attention_score_macs for x in pair)  # noqa: E731
    assert total(g) - total(p) == (r + 1) * H * D * causal_pairs(k)


def test_cache_peaks_both_conventions():
    n, r, k = 512, 4, 64
    prompt, _ = predict("promptdistill", m=M, h=H, n=n, d=D, r=r, k=k, h_kv=HKV)
    assert prompt.cache_scalars_peak == 2 * HKV * n * D * (r + 1)
    assert prompt.cache_scalars_peak_all_heads == 2 * H * n * D * (r + 1)
    assert prompt.cache_scalars_final == 2 * HKV * M * k * D
    allkv, _ = predict("allkv", m=M, h=H, n=n, d=D, h_kv=HKV)
    assert allkv.cache_scalars_final == 2 * M * HKV * n * D


def test_multistage_memory_trace():
    prompt, _ = predict("promptdistill_multi", m=M, h=H, n=512, d=D, r_vec=[2, 4], k_vec=[128, 64], tt=2, h_kv=HKV)
    # peak is reached right after layer 2 appends its 512 rows
    assert prompt.cache_scalars_peak == 2 * HKV * D * 3 * 512
    assert prompt.cache_scalars_final == 2 * HKV * D * 8 * 64


def test_prompt_ratio_approaches_layer_ratio():
    r, k = 3, 16
    ratios = []
    for n in (256, 512, 1024):
        a, _ = predict("allkv", m=M, h=H, n=n, d=D)
        p, _ = predict("promptdistill", m=M, h=H, n=n, d=D, r=r, k=k)
        ratios.append(a.attention_score_macs / p.attention_score_macs)
    target = M / (r + 1)
    assert all(x < target for x in ratios)
    assert abs(ratios[0] - target) > abs(ratios[1] - target) > abs(ratios[2] - target)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError, match="unknown variant"):
        predict("snapkv", m=M, h=H, n=8, d=D)


def test_ledger_causal_counting_and_stages():
    ledger = CostLedger(H, HKV, D)
    ledger.record_attention(0, [0, 1, 2], [0, 1, 2])
    ledger.observe_cache([3])
    ledger.set_phase("generation")
    ledger.record_attention(0, [3], [0, 1, 2, 3])
    ledger.observe_cache([4])
    snap = ledger.snapshot()
    assert snap["prompt"]["attention_score_macs"] == H * D * tri(3)
    assert snap["generation"]["attention_score_macs"] == H * D * 4
    assert snap["generation"]["cache_scalars_final"] == 2 * 4 * HKV * D


def test_audit_reports_mismatch_with_layers():
    pred = predict("allkv", m=1, h=H, n=3, d=D, h_kv=HKV)
    ledger = CostLedger(H, HKV, D)
    ledger.record_attention(0, [0, 1, 2], [0, 1, 2])
    ledger.observe_cache([3])
    assert audit(ledger.snapshot(), pred)["ok"]
    ledger.record_attention(0, [2], [0, 1, 2])
    report = audit(ledger.snapshot(), pred)
    assert not report["ok"]
    assert report["stages"]["prompt"]["layers"]["predicted"] == [H * D * 6]
