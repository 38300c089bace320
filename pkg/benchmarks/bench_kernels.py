"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 512]

Both backends produce bitwise-identical results; the check is repeated here
so a speedup is never reported for diverging output.
"""

import argparse
import statistics
import time

import numpy as np

from kvdistill import kernels
from kvdistill.model import ModelConfig, forward_all, init_random


def timed(fn, repeat):
    samples = []
    out = None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples), out


def cases(n):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n, 64)).astype(np.float32)
    b = rng.standard_normal((64, 256)).astype(np.float32)
    q = rng.standard_normal((n, 4, 16)).astype(np.float32)
    kv = rng.standard_normal((n, 2, 16)).astype(np.float32)
    pos = np.arange(n)
    bundle = init_random(ModelConfig.build(num_layers=8, num_q_heads=4, num_kv_heads=2,
                                           head_dim=16, vocab_size=512, seed=0))
    tokens = rng.integers(0, 512, size=n).tolist()
    return {
        "matmul": lambda: kernels.matmul(a, b),
        "causal_attention": lambda: kernels.causal_attention(q, kv, kv, pos, pos, 0.25),
        "prefill (8 layers)": lambda: forward_all(tokens, bundle)[0].hidden,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--n", type=int, default=512, help="rows / prompt length")
    args = parser.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled core not built; run `pip install -e . --no-build-isolation`")

    print(f"{'kernel':<22}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases(args.n).items():
        with kernels.use_backend("python"):
            slow, ref = timed(fn, args.repeat)
        with kernels.use_backend("compiled"):
            fast, out = timed(fn, args.repeat)
        if ref.tobytes() != out.tobytes():
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<22}{slow * 1e3:>12.2f}{fast * 1e3:>14.2f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
