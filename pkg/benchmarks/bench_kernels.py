"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each case runs once per backend to warm up (numba compiles on first call),
then reports the best of ``--repeat`` timings.
"""

import argparse
import time

import numpy as np

from mwcnn import _accel, kernels
from mwcnn import model as M


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(quick):
    rng = np.random.default_rng(0)
    width = 2048 if quick else 8192
    x = rng.normal(size=(4, 20, 1, width)).astype(np.float32)
    w = rng.normal(size=(20, 20, 1, 10)).astype(np.float32)
    b = np.zeros(20, np.float32)
    gy = rng.normal(size=(4, 20, 1, width - 9)).astype(np.float32)
    xs = rng.normal(size=(4, 1, 64, width)).astype(np.float32)
    ws = rng.normal(size=(20, 1, 1, 11)).astype(np.float32)
    bs = np.zeros(20, np.float32)
    pooled, argmax = kernels.maxpool_forward(x, 4, 4)
    yield f"temporal conv fwd 1x11, 64x{width}", lambda: kernels.conv_forward(xs, ws, bs)
    yield f"conv fwd 20->20 1x10, w={width}", lambda: kernels.conv_forward(x, w, b)
    yield f"conv bwd 20->20 1x10, w={width}", lambda: kernels.conv_backward(x, w, gy)
    yield f"maxpool 4/4, w={width}", lambda: kernels.maxpool_forward(x, 4, 4)
    yield "pool scatter-add", lambda: kernels.scatter_add(argmax.ravel(), pooled.ravel(), x.size,
                                                          np.float32)

    ws_ = 2 if quick else 8
    arch = M.build_arch(ws_, fs=1024, n_channels=64)
    params = M.init_params(arch, 0)
    batch = rng.normal(size=(2, 64, arch.input.n_timesteps)).astype(np.float32)
    labels = np.array([0, 1])

    def step():
        _, cache = M.forward(params, batch, "train", np.random.default_rng(0))
        M.backward(params, cache, labels)

    yield f"network fwd+bwd, {ws_} s @ 1024 Hz, batch 2", step


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    args = parser.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy backend can be timed")
    previous = _accel.get_backend()
    print(f"{'case':46s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    try:
        for name, fn in cases(args.quick):
            timings = {}
            for backend in _accel.BACKENDS:
                if backend == "numba" and not _accel.NUMBA_AVAILABLE:
                    timings[backend] = float("nan")
                    continue
                _accel.set_backend(backend)
                timings[backend] = best_of(fn, args.repeat)
            speedup = timings["numpy"] / timings["numba"]
            print(f"{name:46s} {timings['numba'] * 1e3:10.2f} {timings['numpy'] * 1e3:10.2f} "
                  f"{speedup:7.2f}x")
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
