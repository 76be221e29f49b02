"""Compare the numba and numpy conv2d kernel paths.

Runs forward, input-gradient, and weight-gradient passes over a batch of
typical shapes and reports wall time per backend plus the maximum
elementwise disagreement.  The two paths use different summation orders,
so results agree to rounding (~1e-12) but are not bit-identical.

Usage:  python3 benchmarks/benchmark_backends.py [--repeats N]
"""

from __future__ import annotations

import argparse
import importlib
import os
import time

import numpy as np

SHAPES = [
    # (batch, c_in, h, w, c_out, kernel)
    (16, 3, 32, 32, 16, 3),
    (16, 16, 32, 32, 16, 3),
    (16, 32, 16, 16, 32, 3),
    (64, 16, 32, 32, 16, 3),
    (16, 64, 8, 8, 64, 1),
]


def load_backend(name: str):
    os.environ["BTTA_BACKEND"] = name
    from buffertta import backend

    return importlib.reload(backend)


def run_case(mod, x, w, dout, repeats):
    kh = w.shape[2]
    # warm-up (triggers JIT compilation on the numba path)
    y = mod.conv2d_forward(x, w, 1, 1)
    dx = mod.conv2d_backward_input(dout, w, x.shape, 1, 1)
    dw = mod.conv2d_backward_weight(dout, x, kh, kh, 1, 1)
    start = time.perf_counter()
    for _ in range(repeats):
        mod.conv2d_forward(x, w, 1, 1)
        mod.conv2d_backward_input(dout, w, x.shape, 1, 1)
        mod.conv2d_backward_weight(dout, x, kh, kh, 1, 1)
    elapsed = (time.perf_counter() - start) / repeats
    return elapsed, (y, dx, dw)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}{'max diff':>12}")
    for n, c, h, w_, k, ks in SHAPES:
        pad = 1 if ks == 3 else 0
        x = rng.standard_normal((n, c, h, w_))
        w = rng.standard_normal((k, c, ks, ks))
        ho = h + 2 * pad - ks + 1
        dout = rng.standard_normal((n, k, ho, ho))

        np_mod = load_backend("numpy")
        t_np, out_np = run_case(np_mod, x, w, dout, args.repeats)
        nb_mod = load_backend("numba")
        if nb_mod.BACKEND != "numba":
            print("numba unavailable; nothing to compare")
            return
        t_nb, out_nb = run_case(nb_mod, x, w, dout, args.repeats)

        diff = max(float(np.abs(a - b).max()) for a, b in zip(out_np, out_nb))
        label = f"{n}x{c}x{h}x{w_} k{k} {ks}x{ks}"
        print(
            f"{label:<28}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}"
            f"{t_np / t_nb:>9.2f}{diff:>12.2e}"
        )


if __name__ == "__main__":
    main()
