"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats N] [--json out.json]

Shapes follow the toy base model: 65 tokens x 32 channels per image, a
batch of 32, and the 33x33 bias-augmented head products fed to the SVD.
The first numba call (compilation) is excluded by a warm-up.
"""

import argparse
import json
import time

import numpy as np

from edgevit import _kernels, linalg


def median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t) * 1e3)
    return float(np.median(times))


def cases(rng):
    tokens = rng.standard_normal((32 * 65, 32))
    hidden = rng.standard_normal((32 * 65, 64))
    scores = rng.standard_normal((32 * 4 * 65, 65))
    gamma, beta = rng.standard_normal(32), rng.standard_normal(32)
    head = rng.standard_normal((33, 8)) @ rng.standard_normal((8, 33))
    return {
        "gelu": lambda k: k.gelu(hidden),
        "gelu_grad": lambda k: k.gelu_grad(hidden),
        "softmax_rows": lambda k: getattr(k, "softmax_rows_jit", k.softmax_rows)(scores),
        "layernorm_rows": lambda k: k.layernorm_rows(tokens, gamma, beta, 1e-6),
        "svd_33x33": lambda k: _svd_with(k, head),
    }


def _svd_with(impl, a):
    linalg_backend = _kernels.active
    _kernels.active = impl
    try:
        return linalg.svd(a)
    finally:
        _kernels.active = linalg_backend


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if _kernels.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    for name, fn in cases(np.random.default_rng(args.seed)).items():
        t_np = median_ms(lambda: fn(_kernels.numpy_impl), args.repeats)
        t_nb = median_ms(lambda: fn(_kernels.numba_impl), args.repeats)
        rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb, "speedup": t_np / t_nb})

    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<16}{r['numpy_ms']:>10.3f}{r['numba_ms']:>10.3f}{r['speedup']:>8.2f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
