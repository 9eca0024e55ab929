"""Benchmark the compiled kernels against the pure-Python fallback.

Times the raw kernels (matmul, conv2d forward/backward) on training-scale
shapes, then a batched model log-density under the active backend. Run:

    python benchmarks/bench_kernels.py [--repeats N]
    FLOWAD_PURE_PYTHON=1 python benchmarks/bench_kernels.py   # fallback end to end
"""

import argparse
import time

import numpy as np

from flowad import kernels


def timeit(fn, repeats, min_time=0.05):
    best = float("inf")
    for _ in range(repeats):
        n = 1
        while True:
            start = time.perf_counter()
            for _ in range(n):
                fn()
            elapsed = time.perf_counter() - start
            if elapsed > min_time or n >= 1024:
                best = min(best, elapsed / n)
                break
            n *= 4
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((64, 512))
    b = rng.standard_normal((512, 512))
    x = rng.standard_normal((16, 4, 8, 8))
    w = rng.standard_normal((16, 4, 3, 3))
    gy = rng.standard_normal((16, 16, 8, 8))
    cases = [
        ("matmul 64x512 @ 512x512", lambda impl: impl.matmul(a, b)),
        ("conv2d (16,4,8,8) x 16 3x3", lambda impl: impl.conv2d(x, w)),
        ("conv2d_grad_input", lambda impl: impl.conv2d_grad_input(gy, w)),
        ("conv2d_grad_weight", lambda impl: impl.conv2d_grad_weight(gy, x, 3, 3)),
    ]
    impls = kernels.backends()
    print(f"backends available: {', '.join(impls)} (active: {kernels.BACKEND})")
    header = f"{'case':<30}" + "".join(f"{name:>14}" for name in impls)
    if len(impls) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for name, fn in cases:
        times = {bname: timeit(lambda i=impl: fn(i), repeats) for bname, impl in impls.items()}
        row = f"{name:<30}" + "".join(f"{times[b] * 1e3:>12.2f}ms" for b in impls)
        if "compiled" in times and "python" in times:
            row += f"{times['python'] / times['compiled']:>9.0f}x"
        print(row)


def bench_model(repeats):
    from flowad.models import ModelConfig, build_variant, randomize_model
    from flowad.tensor import Tensor

    cfg = ModelConfig(variant="conv", input_shape=(1, 16, 16), num_scales=2,
                      steps_per_scale=2, hidden_width=12, seed=0)
    model = build_variant(cfg)
    randomize_model(model, np.random.default_rng(1))
    batch = Tensor(np.random.default_rng(2).standard_normal((16, 1, 16, 16)) * 0.2)
    t = timeit(lambda: model.log_prob(batch), repeats)
    print(f"\nmodel log p, batch of 16 1x16x16 images [{kernels.BACKEND}]: {t * 1e3:.1f}ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    bench_kernels(args.repeats)
    bench_model(args.repeats)


if __name__ == "__main__":
    main()
