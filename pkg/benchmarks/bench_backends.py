"""Timing comparison of the compiled and numpy kernel backends.

Runs the four kernel entry points as one fused train step (forward with
activations kept, loss + logit gradient, backward, SGD update) and a bare
inference pass, for every hypothesis in the default capacity schedule at a
few batch sizes.  Both backends are imported side by side, so one process
measures both; medians over many repeats, with warmup discarded.

Usage:
    python benchmarks/bench_backends.py [--repeats N] [--batches 32,256,2048]
"""

import argparse
import statistics
import time

import numpy as np

import sst
from sst import _kernels_py

try:
    from sst import _kernels as _compiled
except ImportError:
    _compiled = None


def train_step(k, model, x, y, lr=0.1, momentum=0.9, wd=1e-4):
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    logits, hidden = k.forward(x, weights, biases, True)
    _, dlogits = k.softmax_xent(logits, y)
    dws, dbs = k.backward(x, weights, hidden, dlogits)
    k.sgd_update(weights, biases, vel_w, vel_b, dws, dbs, lr, momentum, wd)


def infer(k, model, x):
    k.forward(x, model.weights, model.biases, False)


def time_call(fn, repeats):
    fn()  # warmup: first call pays any lazy allocation
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--batches", default="32,256,2048",
                    help="comma-separated batch sizes")
    ap.add_argument("--dim", type=int, default=40)
    ap.add_argument("--classes", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _compiled is None:
        raise SystemExit("compiled backend not built; nothing to compare")

    batches = [int(b) for b in args.batches.split(",")]
    rng = sst.Stream(sst.derive(args.seed, 0xBE7C))
    header = f"{'hypothesis':>12} {'batch':>6} {'op':>6} {'python':>10} {'cython':>10} {'ratio':>7}"
    print(header)
    print("-" * len(header))
    for spec in sst.default_schedule(args.dim, args.classes):
        model = sst.init_model(spec, seed=args.seed)
        for batch in batches:
            x = rng.normal(batch * args.dim).reshape(batch, args.dim)
            y = (rng.uniform(batch) * args.classes).astype(np.int32)
            for op, fn in (("step", train_step), ("infer", infer)):
                times = {}
                for k in (_kernels_py, _compiled):
                    if op == "step":
                        call = lambda: fn(k, model, x, y)
                    else:
                        call = lambda: fn(k, model, x)
                    times[k.BACKEND] = time_call(call, args.repeats)
                ratio = times["python"] / times["cython"]
                print(f"{spec.short_name():>12} {batch:>6} {op:>6} "
                      f"{times['python'] * 1e6:>8.1f}us {times['cython'] * 1e6:>8.1f}us "
                      f"{ratio:>6.2f}x")


if __name__ == "__main__":
    main()
