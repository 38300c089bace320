import numpy as np
import pytest

from kvdistill.cache import CacheError
from kvdistill.model import (
    BundleError,
    ConfigError,
    ModelBundle,
    ModelConfig,
    embed,
    forward_all,
    init_random,
    layer_forward,
    lm_head,
    load_bundle,
    save_bundle,
    tensor_shapes,
)

from .conftest import random_prompt
from .oracles import reference_logits


def test_config_rejects_bad_grouping():
    with pytest.raises(ConfigError) as err:
        ModelConfig.build(num_layers=2, num_q_heads=4, num_kv_heads=3, head_dim=8, vocab_size=10)
    assert err.value.field == "num_kv_heads"


def test_config_rejects_model_dim_mismatch():
    with pytest.raises(ConfigError) as err:
        ModelConfig(2, 4, 2, 8, 30, 64, 10)
    assert err.value.field == "model_dim"


@pytest.mark.parametrize("field", ["num_layers", "vocab_size", "head_dim"])
def test_config_counts_positive(field):
    kw = dict(num_layers=2, num_q_heads=2, num_kv_heads=1, head_dim=4, vocab_size=10)
    kw[field] = 0
    with pytest.raises(ConfigError) as err:
        ModelConfig.build(**kw)
    assert err.value.field == field


def test_init_random_is_deterministic():
    cfg = ModelConfig.build(num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=50, seed=1)
    a, b = init_random(cfg), init_random(cfg)
    for name in tensor_shapes(cfg):
        assert a.weights[name].tobytes() == b.weights[name].tobytes()


def test_init_random_seed_sensitivity():
    cfg1 = ModelConfig.build(num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=50, seed=1)
    cfg2 = ModelConfig.build(num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=50, seed=2)
    assert init_random(cfg1).digest() != init_random(cfg2).digest()


def test_weight_shapes_for_gqa():
    cfg = ModelConfig.build(num_layers=1, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=20)
    b = init_random(cfg)
    assert b.layer(0, "wk").shape == (32, 16)
    assert b.layer(0, "wq").shape == (32, 32)


def test_bundle_round_trip_bitwise(tmp_path, small_bundle):
    save_bundle(small_bundle, tmp_path / "m")
    loaded = load_bundle(tmp_path / "m")
    assert loaded.config == small_bundle.config
    assert loaded.digest() == small_bundle.digest()


def test_loader_rejects_truncated_weights(tmp_path, small_bundle):
    path = save_bundle(small_bundle, tmp_path / "m")
    data = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(data[:-4])
    with pytest.raises(BundleError, match="floats"):
        load_bundle(path)


def test_bundle_rejects_non_finite(small_bundle):
    weights = {k: v.copy() for k, v in small_bundle.weights.items()}
    weights["lm_head"][0, 0] = np.nan
    with pytest.raises(BundleError, match="non-finite"):
        ModelBundle(small_bundle.config, weights)


def test_embed_lookup(small_bundle):
    assert len(embed([], small_bundle)) == 0
    acts = embed([5, 7, 5], small_bundle)
    np.testing.assert_array_equal(acts.hidden[0], acts.hidden[2])
    np.testing.assert_array_equal(acts.hidden[1], small_bundle.weights["embed_tokens"][7])
    np.testing.assert_array_equal(acts.positions, [0, 1, 2])


def test_embed_rejects_out_of_vocab(small_bundle):
    with pytest.raises(ValueError, match="300"):
        embed([1, 300], small_bundle)


def test_prefill_cache_and_causal_mac_count(small_bundle):
    cfg = small_bundle.config
    caches = small_bundle.new_caches()
    ledger = small_bundle.new_ledger()
    n = 11
    layer_forward(0, embed(random_prompt(n, 300, 0), small_bundle), caches[0], small_bundle, ledger)
    assert len(caches[0]) == n
    # row i attends to i+1 keys
    assert ledger.stage("prompt")["attention_score_macs"] == cfg.num_q_heads * cfg.head_dim * n * (n + 1) // 2


def test_single_token_against_cache_mac_count(small_bundle):
    cfg = small_bundle.config
    caches = small_bundle.new_caches()
    c = 9
    layer_forward(0, embed(random_prompt(c, 300, 1), small_bundle), caches[0], small_bundle)
    ledger = small_bundle.new_ledger()
    layer_forward(0, embed([3], small_bundle, positions=[c]), caches[0], small_bundle, ledger)
    assert ledger.stage("prompt")["attention_score_macs"] == cfg.num_q_heads * (c + 1) * cfg.head_dim


def test_incremental_equals_batched(small_bundle):
    tokens = random_prompt(6, 300, 2)
    acts_all, _ = forward_all(tokens, small_bundle)
    caches = small_bundle.new_caches()
    forward_all(tokens[:4], small_bundle, caches)
    for p in (4, 5):
        acts, _ = forward_all([tokens[p]], small_bundle, caches, positions=[p])
    np.testing.assert_allclose(acts.hidden[-1], acts_all.hidden[-1], atol=1e-5)


def test_position_ordering_violation_rejected(small_bundle):
    caches = small_bundle.new_caches()
    layer_forward(0, embed([1, 2, 3], small_bundle), caches[0], small_bundle)
    with pytest.raises(CacheError):
        layer_forward(0, embed([4], small_bundle, positions=[1]), caches[0], small_bundle)
    assert len(caches[0]) == 3


def test_layer_forward_is_pure_and_deterministic(small_bundle):
    digest = small_bundle.digest()
    tokens = random_prompt(8, 300, 3)
    outs = []
    for _ in range(2):
        caches = small_bundle.new_caches()
        outs.append(layer_forward(1, embed(tokens, small_bundle), caches[1], small_bundle).hidden)
    np.testing.assert_array_equal(outs[0], outs[1])
    assert small_bundle.digest() == digest


def test_lm_head_zero_state_zero_logits():
    cfg = ModelConfig.build(num_layers=1, num_q_heads=2, num_kv_heads=1, head_dim=4, vocab_size=11)
    weights = {k: np.zeros(s, dtype=np.float32) for k, s in tensor_shapes(cfg).items()}
    bundle = ModelBundle(cfg, weights)
    logits = lm_head(embed([0, 1], bundle), bundle)
    assert logits.shape == (11,)
    np.testing.assert_array_equal(logits, 0)


def test_lm_head_matches_float64_reference(small_bundle):
    tokens = random_prompt(12, 300, 4)
    acts, _ = forward_all(tokens, small_bundle)
    logits = lm_head(acts, small_bundle)
    ref = reference_logits(tokens, small_bundle)
    assert logits.shape == (small_bundle.config.vocab_size,)
    np.testing.assert_allclose(logits, ref, atol=1e-4)
    assert int(np.argmax(logits)) == int(np.argmax(ref))


def test_mha_special_case_is_exact():
    # h_kv == h goes through the same code; compare against kv weights expanded by hand
    cfg = ModelConfig.build(num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=40, seed=9)
    gqa = init_random(cfg)
    mha_cfg = ModelConfig.build(num_layers=2, num_q_heads=4, num_kv_heads=4, head_dim=8, vocab_size=40, seed=9)
    weights = dict(gqa.weights)
    for i in range(2):
        for name in ("wk", "wv"):
            w = gqa.layer(i, name).reshape(32, 2, 8)
            weights[f"layers.{i}.{name}"] = np.repeat(w, 2, axis=1).reshape(32, 32).copy()
    mha = ModelBundle(mha_cfg, weights)
    tokens = random_prompt(10, 40, 5)
    a, _ = forward_all(tokens, gqa)
    b, _ = forward_all(tokens, mha)
    np.testing.assert_array_equal(a.hidden, b.hidden)
