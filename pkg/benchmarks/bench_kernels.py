"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py --repeat 20

Reports the best and median wall time per call for each kernel, plus a
forward/backward pass through one attention block, under every available
backend. Results are also checked for bitwise agreement.
"""
import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from tripse import kernels
from tripse.attention import attention_forward, make_attention
from tripse.tensor import Tensor


def timed(fn, repeat, warmup=3):
    for _ in range(warmup):
        out = fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter_ns()
        out = fn()
        samples.append(time.perf_counter_ns() - t0)
    return out, samples


def block_pass(variant, x):
    blk = make_attention(variant, *x.shape[1:], kernel_size=7, rng=np.random.default_rng(0))
    blk.train(True)

    def run():
        xt = Tensor(x, requires_grad=True)
        y = attention_forward(xt, blk)
        y.sum().backward()
        return xt.grad

    return run


def cases(shape):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    n, c, h, w = shape
    planes = rng.standard_normal((n, 2, h, w)).astype(np.float32)
    cols = kernels.BACKENDS["python"].im2col(planes, 7, 1, 3)
    zout, argmax = kernels.BACKENDS["python"].zpool_forward(x)
    g = rng.standard_normal(zout.shape).astype(np.float32)
    return {
        "im2col k7": lambda mod: mod.im2col(planes, 7, 1, 3),
        "col2im k7": lambda mod: mod.col2im(cols, 2, h, w, 7, 1, 3),
        "zpool fwd": lambda mod: mod.zpool_forward(x)[0],
        "zpool bwd": lambda mod: mod.zpool_backward(g, argmax, c),
    }, x


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", default="8,64,28,28")
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--variants", default="ta,tripse1,tripse4")
    args = ap.parse_args()
    shape = tuple(int(v) for v in args.shape.split(","))
    names = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(names)}  shape={shape}  repeat={args.repeat}")

    raw, x = cases(shape)
    rows = []
    for label, fn in raw.items():
        outs, best = {}, {}
        for name in names:
            out, samples = timed(lambda: fn(kernels.BACKENDS[name]), args.repeat)
            outs[name] = np.asarray(out).tobytes()
            best[name] = (min(samples), statistics.median(samples))
        rows.append((label, best, len(set(outs.values())) == 1))

    prev = kernels.BACKEND
    try:
        for variant in args.variants.split(","):
            outs, best = {}, {}
            for name in names:
                kernels.use_backend(name)
                out, samples = timed(block_pass(variant, x), max(3, args.repeat // 4), warmup=1)
                outs[name] = out.tobytes()
                best[name] = (min(samples), statistics.median(samples))
            rows.append((f"{variant} fwd+bwd", best, len(set(outs.values())) == 1))
    finally:
        kernels.use_backend(prev)

    head = f"{'case':<18}" + "".join(f"{n + ' best ms':>18}{n + ' median ms':>20}" for n in names)
    if len(names) > 1:
        head += f"{'speedup':>10}"
    print(head + f"{'bitwise':>9}")
    for label, best, same in rows:
        line = f"{label:<18}" + "".join(f"{best[n][0] / 1e6:>18.3f}{best[n][1] / 1e6:>20.3f}" for n in names)
        if "cython" in best and "python" in best:
            line += f"{best['python'][0] / best['cython'][0]:>9.2f}x"
        print(line + f"{'yes' if same else 'NO':>9}")


if __name__ == "__main__":
    with threadpool_limits(1):
        main()
