#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times the four hot kernels (conv forward/backward, transposed conv,
pooling) on the shapes the training loop actually runs, plus one full
train step through the autodiff layer per backend.

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import os
import time

import numpy as np


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3  # ms


def bench_kernels(backends, repeats):
    rng = np.random.default_rng(0)
    shapes = [
        ("conv 8->8 @32x32", (8, 32, 32), 8),
        ("conv 16->16 @16x16", (16, 16, 16), 16),
        ("conv 32->32 @8x8", (32, 8, 8), 32),
        ("conv 6->8 @128x128", (6, 128, 128), 8),
    ]
    rows = []
    for label, xshape, out_ch in shapes:
        x = rng.normal(size=xshape).astype(np.float32)
        k = rng.normal(size=(out_ch, xshape[0], 3, 3)).astype(np.float32)
        b = rng.normal(size=out_ch).astype(np.float32)
        gy = rng.normal(size=(out_ch, *xshape[1:])).astype(np.float32)
        for tag, fn in (
            ("fwd", lambda be: be.conv2d_fwd(x, k, b)),
            ("bwd", lambda be: be.conv2d_bwd(x, k, gy)),
        ):
            times = {be.NAME: timeit(lambda be=be: fn(be), repeats) for be in backends}
            rows.append((f"{label} {tag}", times))

    x = rng.normal(size=(32, 8, 8)).astype(np.float32)
    k = rng.normal(size=(16, 32, 3, 3)).astype(np.float32)
    b = np.zeros(16, dtype=np.float32)
    times = {
        be.NAME: timeit(lambda be=be: be.conv2d_transpose_fwd(x, k, b), repeats)
        for be in backends
    }
    rows.append(("transpose 32->16 @8x8 fwd", times))

    x = rng.normal(size=(16, 32, 32)).astype(np.float32)
    times = {be.NAME: timeit(lambda be=be: be.max_pool2_fwd(x), repeats) for be in backends}
    rows.append(("maxpool 16ch @32x32 fwd", times))
    return rows


def bench_train_step(repeats):
    """One 32x32-patch gradient step per backend, through autodiff."""
    import importlib

    results = {}
    for pure in ("", "1"):
        os.environ["FLOODSEG_PURE"] = pure
        import floodseg.kernels as kern

        importlib.reload(kern)
        import floodseg.autodiff as ad

        importlib.reload(ad)
        import floodseg.model as mod

        importlib.reload(mod)
        import floodseg.loss as lo

        importlib.reload(lo)

        rng = np.random.default_rng(1)
        m = mod.FloodNet(mod.ModelConfig(
            spectral_channels=6, blocks=3, base_channels=8, patch_size=32,
            dtype="float32"))
        m.init_params(0)
        spec = ad.Tensor(rng.normal(size=(6, 32, 32)).astype(np.float32))
        elev = ad.Tensor(rng.uniform(0, 1, size=(1, 32, 32)).astype(np.float32))
        gt = rng.choice([-1, 0, 1], size=(32, 32)).astype(np.int8)
        h = rng.normal(size=(32, 32)) * 4
        cfg = lo.LossConfig(scheme="eva")

        def step():
            ad.backward(lo.total_loss(m.forward(spec, elev), gt, h, cfg))

        results[kern.BACKEND_NAME] = timeit(step, repeats)
    os.environ.pop("FLOODSEG_PURE", None)
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    from floodseg.kernels import available_backends

    backends = available_backends()
    names = [b.NAME for b in backends]
    if len(backends) < 2:
        print("compiled core not built; timing the numpy fallback only")

    rows = bench_kernels(backends, args.repeats)
    width = max(len(r[0]) for r in rows)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{n:>10}" for n in names)
    if len(names) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, times in rows:
        line = f"{label:<{width}}  " + "  ".join(f"{times[n]:>8.3f}ms" for n in names)
        if len(names) == 2:
            line += f"  {times[names[1]] / times[names[0]]:>7.2f}x"
        print(line)

    print()
    step_times = bench_train_step(max(10, args.repeats // 5))
    for name, ms in step_times.items():
        print(f"full train step (3-block, 32x32 patch, {name:>8}): {ms:8.3f}ms")
    if len(step_times) == 2:
        a, b = step_times.values()
        print(f"train-step speedup: {b / a:.2f}x")


if __name__ == "__main__":
    main()
