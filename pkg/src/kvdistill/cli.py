"""Command-line workbench.

Every flag can also be given through an environment variable named
``DISTILL_`` + the flag name in upper case with dashes as underscores
(``--max-new-tokens`` -> ``DISTILL_MAX_NEW_TOKENS``). Flags win over the
environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import costs, metrics, tokenizer
from .model import ModelConfig, init_random, load_bundle, save_bundle, tensor_shapes
from .needle import PlantedNeedleSpec, oracle_bundle, random_needle, synth_prompt
from .pipelines import PipelineConfig, compare_runs, run_pipeline, select_at_layer
from .selection import SelectionSchedule

ENV_PREFIX = "DISTILL_"


class UsageError(ValueError):
    pass


def _env_name(flag: str) -> str:
    return ENV_PREFIX + flag.lstrip("-").replace("-", "_").upper()


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def _add(parser, flag, **kw):
    """add_argument with the environment variable as fallback default."""
    env = os.environ.get(_env_name(flag))
    if env is not None:
        if kw.get("action") == "store_true":
            kw["default"] = _truthy(env)
        else:
            conv = kw.get("type", str)
            kw["default"] = conv(env)
        kw["required"] = False
    kw.setdefault("help", "")
    kw["help"] = (kw["help"] + f" [env {_env_name(flag)}]").strip()
    parser.add_argument(flag, **kw)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).replace(" ", "").split(",") if x]


# ---------------------------------------------------------------------------
# shared argument groups
# ---------------------------------------------------------------------------

def _arch_args(p, defaults: bool):
    _add(p, "--layers", type=int, default=8 if defaults else None, required=not defaults,
         help="number of decoder layers")
    _add(p, "--heads", type=int, default=4 if defaults else None, required=not defaults,
         help="query heads")
    _add(p, "--kv-heads", type=int, default=None, help="key/value heads (default: --heads)")
    _add(p, "--head-dim", type=int, default=16 if defaults else None, required=not defaults,
         help="per-head dimension")


def _prompt_args(p):
    _add(p, "--prompt-ids", help="file of newline-separated token ids")
    _add(p, "--text", help="text prompt, encoded with the byte tokenizer")
    _add(p, "--synth-haystack", type=int, help="synthesise a planted-needle prompt of this length")
    _add(p, "--synth-needle", help="comma-separated needle ids (default: 8 random ids)")
    _add(p, "--synth-depth", type=float, default=50.0, help="needle depth percentage")
    _add(p, "--synth-seed", type=int, default=0, help="filler seed")


def _load_prompt(args, vocab_size: int) -> list[int]:
    sources = [s for s in ("prompt_ids", "text", "synth_haystack") if getattr(args, s) is not None]
    if len(sources) != 1:
        raise UsageError("give exactly one of --prompt-ids, --text, --synth-haystack")
    if args.prompt_ids is not None:
        return tokenizer.read_id_file(args.prompt_ids)
    if args.text is not None:
        if vocab_size < tokenizer.MIN_VOCAB:
            raise UsageError(f"text prompts need vocab_size >= {tokenizer.MIN_VOCAB}")
        return tokenizer.encode(args.text)
    needle = (tuple(_int_list(args.synth_needle)) if args.synth_needle
              else random_needle(8, vocab_size, args.synth_seed))
    spec = PlantedNeedleSpec(args.synth_haystack, needle, args.synth_depth, args.synth_seed)
    return synth_prompt(spec, vocab_size)[0]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_model(args) -> int:
    config = ModelConfig.build(
        num_layers=args.layers,
        num_q_heads=args.heads,
        num_kv_heads=args.kv_heads or args.heads,
        head_dim=args.head_dim,
        vocab_size=args.vocab,
        mlp_hidden_dim=args.mlp_hidden,
        rope_theta=args.rope_theta,
        norm_eps=args.norm_eps,
        seed=args.seed,
    )
    bundle = init_random(config)
    out = save_bundle(bundle, args.out)
    summary = {
        "bundle": str(out),
        "config": config.to_dict(),
        "tensors": len(tensor_shapes(config)),
        "total_floats": sum(w.size for w in bundle.weights.values()),
        "layer_weight_bytes": bundle.layer_weight_bytes(0),
        "sha256": bundle.digest(),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _schedule(args) -> SelectionSchedule | None:
    if args.variant == "allkv":
        return None
    if args.layers_select is None or args.topk is None:
        raise UsageError(f"variant {args.variant} needs --layers-select and --topk")
    layers, counts = _int_list(args.layers_select), _int_list(args.topk)
    tt = args.tt if args.tt is not None else (len(layers) if args.variant == "promptdistill_multi" else 1)
    return SelectionSchedule(
        tuple(layers), tuple(counts), tt,
        force_include_last=not args.no_force_last,
        aggregation=args.aggregation,
    )


def cmd_generate(args) -> int:
    bundle = load_bundle(args.model)
    tokens = _load_prompt(args, bundle.config.vocab_size)
    config = PipelineConfig(
        variant=args.variant,
        schedule=_schedule(args),
        max_new_tokens=args.max_new_tokens,
        eos_id=args.eos,
        positions=args.positions,
    )
    result = run_pipeline(tokens, bundle, config)
    text = metrics.dumps(metrics.to_metrics(result, deterministic=args.deterministic))
    if args.dump_cache:
        metrics.write_atomic(args.dump_cache, json.dumps(result.cache_dump, indent=2) + "\n")
    if args.tokens_out:
        metrics.write_atomic(args.tokens_out, tokenizer.format_id_file(result.tokens))
    if args.out:
        metrics.write_atomic(args.out, text)
        print(" ".join(str(t) for t in result.tokens))
    else:
        sys.stdout.write(text)
    return 0


def cmd_compare(args) -> int:
    a, b = metrics.load(args.run_a), metrics.load(args.run_b)
    report = compare_runs(a, b)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        metrics.write_atomic(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_cost(args) -> int:
    h_kv = args.kv_heads or args.heads
    common = dict(m=args.layers, h=args.heads, n=args.n, d=args.head_dim, t=args.T, h_kv=h_kv)
    r_vec = _int_list(args.r_vec) if args.r_vec else [args.r]
    k_vec = _int_list(args.k_vec) if args.k_vec else [args.k]
    rows = {}
    for variant in costs.VARIANTS:
        if variant == "allkv":
            pair = costs.predict(variant, **common)
        elif variant == "promptdistill_multi":
            pair = costs.predict(variant, r_vec=r_vec, k_vec=k_vec,
                                 tt=args.tt or len(r_vec), **common)
        else:
            pair = costs.predict(variant, r=args.r, k=args.k, **common)
        rows[variant] = {p.stage: p.to_dict() for p in pair}
    if args.format == "json":
        print(json.dumps({"params": dict(common, r=args.r, k=args.k, r_vec=r_vec, k_vec=k_vec),
                          "variants": rows}, indent=2, sort_keys=True))
        return 0
    header = f"{'variant':<22}{'stage':<12}{'score MACs':>16}  {'cache peak (h_kv)':>18}  Θ"
    print(header)
    print("-" * len(header))
    for variant, stages in rows.items():
        for stage, pred in stages.items():
            print(f"{variant:<22}{stage:<12}{pred['attention_score_macs']:>16,}  "
                  f"{pred['cache_scalars_peak']:>18,}  {pred['theta']}")
    return 0


def cmd_select_debug(args) -> int:
    bundle = load_bundle(args.model)
    tokens = _load_prompt(args, bundle.config.vocab_size)
    outcome = select_at_layer(tokens, bundle, args.layer, args.topk,
                              force_include_last=not args.no_force_last,
                              aggregation=args.aggregation)
    report = {"layer": args.layer, "k": args.topk, "n": len(tokens), **outcome.to_dict()}
    print(json.dumps(report, indent=2))
    return 0


def cmd_synth_needle(args) -> int:
    needle = (tuple(_int_list(args.needle)) if args.needle
              else random_needle(args.needle_len, args.vocab, args.seed))
    spec = PlantedNeedleSpec(args.haystack_len, needle, args.depth, args.seed)
    tokens, span = synth_prompt(spec, args.vocab)
    metrics.write_atomic(args.out_prompt, tokenizer.format_id_file(tokens))
    expected = {"needle": list(needle), "start": span[0], "end": span[-1], "indices": span}
    metrics.write_atomic(args.out_expected, json.dumps(expected, indent=2) + "\n")
    if args.oracle_model:
        config = ModelConfig.build(
            num_layers=args.layers, num_q_heads=args.heads,
            num_kv_heads=args.kv_heads or args.heads, head_dim=args.head_dim,
            vocab_size=args.vocab, rope_theta=args.rope_theta, seed=args.seed,
        )
        save_bundle(oracle_bundle(config, needle, args.haystack_len), args.oracle_model)
    print(json.dumps({"prompt": args.out_prompt, **expected}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-model", help="write a seeded random model bundle")
    _arch_args(p, defaults=False)
    _add(p, "--vocab", type=int, required=True, help="vocabulary size")
    _add(p, "--mlp-hidden", type=int, default=None, help="MLP hidden width (default 2*model_dim)")
    _add(p, "--rope-theta", type=float, default=10000.0)
    _add(p, "--norm-eps", type=float, default=1e-5)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--out", required=True, help="bundle directory")
    p.set_defaults(func=cmd_make_model)

    p = sub.add_parser("generate", help="run one pipeline and emit metrics JSON")
    _add(p, "--model", required=True, help="bundle directory")
    _prompt_args(p)
    _add(p, "--variant", default="promptdistill", choices=costs.VARIANTS)
    _add(p, "--layers-select", help="selection layer(s), comma separated")
    _add(p, "--topk", help="tokens kept per stage, comma separated")
    _add(p, "--tt", type=int, default=None, help="number of stages that truncate caches")
    _add(p, "--max-new-tokens", type=int, default=16)
    _add(p, "--eos", type=int, default=None, help="stop early on this token id")
    _add(p, "--no-force-last", action="store_true", help="allow dropping the last prompt token")
    _add(p, "--aggregation", default="softmax_sum", choices=("softmax_sum", "raw_logit_sum"))
    _add(p, "--positions", default="original", choices=("original", "compact"))
    _add(p, "--out", help="metrics JSON path (default: stdout)")
    _add(p, "--tokens-out", help="write generated ids here")
    _add(p, "--dump-cache", help="write per-layer cache lengths and positions here")
    _add(p, "--deterministic", action="store_true", help="omit timing from metrics")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("compare", help="diff two metrics files")
    p.add_argument("run_a")
    p.add_argument("run_b")
    _add(p, "--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cost", help="closed-form costs for every variant")
    _arch_args(p, defaults=True)
    _add(p, "--n", type=int, default=512)
    _add(p, "--r", type=int, default=4)
    _add(p, "--k", type=int, default=64)
    _add(p, "--T", type=int, default=16)
    _add(p, "--tt", type=int, default=None)
    _add(p, "--r-vec", help="multi-stage layers, comma separated")
    _add(p, "--k-vec", help="multi-stage token counts, comma separated")
    _add(p, "--format", default="text", choices=("text", "json"))
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("select-debug", help="dump selection scores at one layer")
    _add(p, "--model", required=True)
    _prompt_args(p)
    _add(p, "--layer", type=int, required=True)
    _add(p, "--topk", type=int, required=True)
    _add(p, "--no-force-last", action="store_true")
    _add(p, "--aggregation", default="softmax_sum", choices=("softmax_sum", "raw_logit_sum"))
    p.set_defaults(func=cmd_select_debug)

    p = sub.add_parser("synth-needle", help="write a planted-needle prompt (and oracle model)")
    _add(p, "--haystack-len", type=int, required=True)
    _add(p, "--needle", help="comma-separated needle ids")
    _add(p, "--needle-len", type=int, default=8, help="random needle length when --needle is absent")
    _add(p, "--depth", type=float, default=50.0)
    _add(p, "--seed", type=int, default=0)
    _add(p, "--vocab", type=int, default=512)
    _add(p, "--out-prompt", required=True)
    _add(p, "--out-expected", required=True)
    _add(p, "--oracle-model", help="also write a hand-built bundle that recovers the needle")
    _arch_args(p, defaults=True)
    _add(p, "--rope-theta", type=float, default=10000.0)
    p.set_defaults(func=cmd_synth_needle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        field = getattr(exc, "field", None)
        if field:
            error["field"] = field
        sys.stderr.write(json.dumps(error) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
