"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--rows 8640] [--width 160]

Reports the best-of-N time for each kernel on each available backend, then
one training step (forward + backward) of a small model under each backend.
"""

import argparse
import timeit

import numpy as np

from dltm import kernels
from dltm.model import ModelConfig, init_params, prepare_meta
from dltm.model.network import forward
from dltm.optim import bce_with_logits, compute_grads
from dltm.tensor import use_backend


def kernel_cases(rows: int, width: int, rng: np.random.Generator):
    x = np.ascontiguousarray(rng.normal(size=(rows, width)))
    gy = np.ascontiguousarray(rng.normal(size=(rows, width)))
    gamma, beta = rng.normal(size=width), rng.normal(size=width)
    signal = np.ascontiguousarray(rng.normal(size=(rows, 250)))

    def cases(k):
        y = k.softmax_forward(x)
        _, xhat, rstd = k.layer_norm_forward(x, gamma, beta, 1e-5)
        pooled, arg = k.max_pool_forward(signal, 5)
        return {
            "softmax_forward": lambda: k.softmax_forward(x),
            "softmax_backward": lambda: k.softmax_backward(y, gy),
            "layer_norm_forward": lambda: k.layer_norm_forward(x, gamma, beta, 1e-5),
            "layer_norm_backward": lambda: k.layer_norm_backward(gy, xhat, rstd, gamma),
            "gelu_forward": lambda: k.gelu_forward(x),
            "gelu_backward": lambda: k.gelu_backward(x, gy),
            "max_pool_forward": lambda: k.max_pool_forward(signal, 5),
            "max_pool_backward": lambda: k.max_pool_backward(np.ones_like(pooled), arg, 250),
        }

    return cases


def train_step_case(batch: int):
    config = ModelConfig(num_classes=4, embed_dim=64, hidden_dim=192, num_heads=4)
    params = init_params(config, 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 12, 250))
    y = (rng.random((batch, 4)) < 0.5).astype(float)
    meta = prepare_meta([{"age": 50.0, "sex": "male"}] * batch, config)
    return lambda: compute_grads(lambda: bce_with_logits(forward(x, meta, params, config), y), params)


def best_of(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--rows", type=int, default=8640, help="rows per kernel call (72 tokens x 120 windows)")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--batch", type=int, default=16, help="windows per training step")
    args = p.parse_args(argv)

    names = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(names)} (default: {kernels.BACKEND_NAME})")
    make = kernel_cases(args.rows, args.width, np.random.default_rng(0))
    per_backend = {n: make(kernels.BACKENDS[n]) for n in names}
    header = f"{'kernel':<22}" + "".join(f"{n + ' ms':>12}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for case in per_backend[names[0]]:
        times = [best_of(per_backend[n][case], args.repeat) for n in names]
        line = f"{case:<22}" + "".join(f"{1e3 * t:>12.3f}" for t in times)
        if "cython" in names and "numpy" in names:
            line += f"{times[names.index('numpy')] / times[names.index('cython')]:>9.2f}x"
        print(line)

    step = train_step_case(args.batch)
    for n in names:
        with use_backend(n):
            print(f"train step ({n}, batch {args.batch}): {1e3 * best_of(step, max(3, args.repeat // 5)):.1f} ms")


if __name__ == "__main__":
    main()
