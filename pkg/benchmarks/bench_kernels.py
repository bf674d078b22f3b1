"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from fusionforge import _fallback

try:
    from fusionforge import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    S = rng.uniform(size=(600, 18))
    Y = np.eye(6)[rng.integers(0, 6, 600)]
    W = rng.normal(size=(18, 6))
    X = rng.normal(size=(300, 300))
    T, B, D, H = 20, 16, 4, 16
    Xs = rng.normal(size=(T, B, D))
    Wx, Wh = rng.normal(size=(4 * H, D)) * 0.3, rng.normal(size=(4 * H, H)) * 0.3
    P, b = rng.normal(size=(3, H)) * 0.3, np.zeros(4 * H)
    dH = rng.normal(size=(T, B, H))

    def forward(mod):
        return lambda: mod.lstm_layer_forward(Xs, Wx, Wh, P, b)

    def backward(mod):
        fwd = mod.lstm_layer_forward(Xs, Wx, Wh, P, b)
        return lambda: mod.lstm_layer_backward(Xs, Wx, Wh, P, *fwd, dH)

    def prng(mod, fn, *extra):
        out = np.empty(100_000)
        state = np.array([1, 2, 3, 4], dtype=np.uint64)
        return lambda: getattr(mod, fn)(state, out, *extra)

    return {
        "logistic loss+grad (600x18, C=6)": lambda mod: (lambda: mod.logistic_loss_grad(S, Y, W, True)),
        "soft threshold (300x300)": lambda mod: (lambda: mod.soft_threshold(X, 0.5)),
        "xoshiro uniform (1e5 draws)": lambda mod: prng(mod, "xoshiro_uniform"),
        "xoshiro noise (1e5 draws)": lambda mod: prng(mod, "xoshiro_noise", 1.5),
        "lstm layer forward (T=20, B=16, H=16)": forward,
        "lstm layer backward (T=20, B=16, H=16)": backward,
    }


def best_ms(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, make in cases(rng).items():
        py = best_ms(make(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:42s} {py:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        cy = best_ms(make(_kernels), args.repeat)
        print(f"{name:42s} {py:10.3f} {cy:10.3f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
