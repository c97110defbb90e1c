"""Compare the compiled row kernels with the NumPy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 50] [--rows 2048] [--cols 512]

Prints one line per kernel with the best-of-repeat time for each backend and
the speedup, then an end-to-end BPE training and a training-step timing.
"""

import argparse
import sys
import time

import numpy as np

from latentdialog import kernels


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols))
    dy = rng.standard_normal((rows, cols))
    gain = rng.standard_normal(cols)
    bias = rng.standard_normal(cols)
    _, xhat, rstd = kernels.layer_norm_forward(x, gain, bias, 1e-5)
    y = kernels.softmax_forward(x)
    ly = kernels.log_softmax_forward(x)
    words = rng.integers(5, 12, size=rows * 8).astype(np.int32)
    offsets = np.arange(0, words.size + 1, 8, dtype=np.int64)
    return {
        "layer_norm_forward": lambda: kernels.layer_norm_forward(x, gain, bias, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(dy, xhat, rstd, gain),
        "softmax_forward": lambda: kernels.softmax_forward(x),
        "softmax_backward": lambda: kernels.softmax_backward(y, dy),
        "log_softmax_forward": lambda: kernels.log_softmax_forward(x),
        "log_softmax_backward": lambda: kernels.log_softmax_backward(ly, dy),
        "merge_pair": lambda: kernels.merge_pair(words, offsets, 7, 8, 300),
    }


def end_to_end_cases():
    from latentdialog.config import RunConfig
    from latentdialog.corpus import build_batch, generate_synthetic
    from latentdialog.tokenizer import train_bpe
    from latentdialog.training import System, make_optimizer, step_rng, train_step, trim

    train, oracle = generate_synthetic(0, 100, 8)
    texts = [t.text for s in train for t in s.context] + sorted(r for v in oracle.valid.values() for r in v)
    vocab = train_bpe(texts, 512)
    cfg = RunConfig(d_model=64, n_heads=4, d_ff=128, max_ctx=32, max_resp=16, steps=10)
    batch = trim(build_batch(train[:32], vocab, cfg.max_ctx, cfg.max_resp))

    def step():
        system = System(cfg, vocab.size)
        opt = make_optimizer(system)
        for s in range(1, 4):
            train_step(system, batch, opt, s, step_rng(0, s))

    return {"train_bpe (512 merges target)": lambda: train_bpe(texts, 512), "3 training steps": step}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--rows", type=int, default=2048)
    p.add_argument("--cols", type=int, default=512)
    p.add_argument("--skip-end-to-end", action="store_true")
    args = p.parse_args(argv)

    if "cython" not in kernels.BACKENDS:
        print("compiled extension not built; only the NumPy fallback is available", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.rows, args.cols, rng)
    if not args.skip_end_to_end:
        cases.update(end_to_end_cases())
    print(f"{'case':<30s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    prev = kernels.BACKEND
    try:
        for name, fn in cases.items():
            repeat = args.repeat if name in kernels.__dict__ else max(1, args.repeat // 10)
            times = {}
            for backend in ("cython", "python"):
                kernels.use_backend(backend)
                fn()
                times[backend] = best_time(fn, repeat)
            print(f"{name:<30s} {times['cython'] * 1e3:>10.3f} {times['python'] * 1e3:>10.3f} "
                  f"{times['python'] / times['cython']:>7.2f}x")
    finally:
        kernels.use_backend(prev)
    return 0


if __name__ == "__main__":
    sys.exit(main())
