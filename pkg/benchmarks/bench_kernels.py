"""Microbenchmark for the hot numeric kernels: numba backend vs pure numpy.

Shapes mirror one training step of the bundled presets (batch 16, d_model 64,
vocab ~600).  Run with XLINGDEF_KERNELS=auto (default) to compare both paths;
with XLINGDEF_KERNELS=numpy only the reference path is timed.

    python3 benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import time

import numpy as np

from xlingdef.numcore import kernels


def median_time(fn, args, repeats):
    fn(*args)  # warmup (and numba JIT on first call)
    fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def build_cases(rng):
    x_sm = rng.standard_normal((2048, 48))
    p_sm = kernels.NUMPY_IMPLS["softmax_rows"](x_sm)
    g_sm = rng.standard_normal(p_sm.shape)

    x_ln = rng.standard_normal((1024, 64))
    gain = rng.standard_normal(64)
    bias = rng.standard_normal(64)
    _, mean, rstd = kernels.NUMPY_IMPLS["layernorm_rows"](x_ln, gain, bias, 1e-5)
    g_ln = rng.standard_normal(x_ln.shape)

    logits = rng.standard_normal((512, 604))
    targets = rng.integers(0, 604, size=512)
    targets[rng.random(512) < 0.1] = 0  # pad rows
    _, count, probs = kernels.NUMPY_IMPLS["cross_entropy_fwd"](logits, targets, 0)

    n_params = 800_000
    p = rng.standard_normal(n_params)
    g = rng.standard_normal(n_params)
    m = np.zeros(n_params)
    v = np.zeros(n_params)

    g_emb = rng.standard_normal((1024, 64))
    ids = rng.integers(0, 604, size=1024)
    gtable = np.zeros((604, 64))

    return [
        ("softmax_rows", "(2048, 48)", (x_sm,)),
        ("softmax_rows_bwd", "(2048, 48)", (p_sm, g_sm)),
        ("layernorm_rows", "(1024, 64)", (x_ln, gain, bias, 1e-5)),
        ("layernorm_rows_bwd", "(1024, 64)", (g_ln, x_ln, gain, mean, rstd)),
        ("cross_entropy_fwd", "(512, 604)", (logits, targets, 0)),
        ("cross_entropy_bwd", "(512, 604)", (probs, targets, 0, 1.0 / count, 1.0)),
        ("adam_update", "(800000,)", (p, g, m, v, 3, 1e-3, 0.9, 0.999, 1e-8)),
        ("embedding_grad", "(1024, 64)->(604, 64)", (g_emb, ids, gtable)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30,
                    help="timed calls per kernel (median reported)")
    ap.add_argument("--quick", action="store_true", help="5 repeats only")
    args = ap.parse_args(argv)
    repeats = 5 if args.quick else args.repeats

    rng = np.random.default_rng(0)
    cases = build_cases(rng)
    active = kernels.backend_name()
    print(f"active backend: {active} (XLINGDEF_KERNELS)")
    print(f"repeats per kernel: {repeats}\n")

    header = f"{'kernel':<20} {'shape':<22} {'numpy us':>10}"
    if active == "numba":
        header += f" {'numba us':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, shape, call_args in cases:
        t_np = median_time(kernels.NUMPY_IMPLS[name], call_args, repeats)
        row = f"{name:<20} {shape:<22} {t_np * 1e6:>10.1f}"
        if active == "numba":
            t_nb = median_time(getattr(kernels, name), call_args, repeats)
            row += f" {t_nb * 1e6:>10.1f} {t_np / t_nb:>7.1f}x"
        print(row)
    if active != "numba":
        print("\nnumba path inactive; rerun with XLINGDEF_KERNELS=auto and "
              "numba installed to compare.")


if __name__ == "__main__":
    main()
