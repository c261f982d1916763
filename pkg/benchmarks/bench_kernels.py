"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

import sgd_influence.influence as influence
import sgd_influence.model as model
import sgd_influence.trainer as trainer
from sgd_influence._backend import available_backends
from sgd_influence.dataset import gen_blobs
from sgd_influence.model import ModelSpec
from sgd_influence.trainer import TrainConfig


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def _use(mod):
    for m in (model, trainer, influence):
        m.kernels = mod


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    spec = ModelSpec(64, (32,), 10)
    ds = gen_blobs(100, 10, 64, 5.0, 0)
    rng = np.random.default_rng(0)
    theta = model.init_params(spec, 0)
    v = rng.normal(size=spec.n_params)
    x32, y32 = ds.features[:32], ds.labels[:32].astype(np.int64)
    cfg = TrainConfig(lr=0.05, epochs=2, batch_size=32, policy="last_epoch")

    def lie():
        res = trainer.train(spec, ds, cfg)
        q = influence.query_from_validation(spec, res.cache.final_params(), ds)
        influence.lie_backward(spec, res.cache, ds, q, "stored")

    cases = {
        "grad_sum (B=32)": lambda k: k.grad_sum(theta, spec.dims, spec.act_code, x32, y32),
        "hvp_sum (B=32)": lambda k: k.hvp_sum(theta, spec.dims, spec.act_code, x32, y32, v),
        "train 2 epochs (N=1000)": lambda k: trainer.train(spec, ds, cfg),
        "train + LIE (N=1000)": lambda k: lie(),
    }
    backends = available_backends()
    print(f"model {spec.describe()}, p={spec.n_params}; best of {args.repeat}")
    print(f"{'case':<26}" + "".join(f"{b:>14}" for b in sorted(backends)) + f"{'speedup':>10}")
    try:
        for name, fn in cases.items():
            row = {}
            for b in sorted(backends):
                _use(backends[b])
                row[b] = _best(lambda: fn(backends[b]), args.repeat)
            speed = row["python"] / row["compiled"] if "compiled" in row else float("nan")
            print(f"{name:<26}" + "".join(f"{row[b] * 1e3:>12.3f}ms" for b in sorted(backends)) + f"{speed:>9.1f}x")
    finally:
        from sgd_influence._backend import kernels
        _use(kernels)


if __name__ == "__main__":
    main()
