"""Time the numpy and Cython kernel backends on desk-scale training shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow one desk-preset training step: a batch of 64 utterances of
50 frames x 16 bins through the first conv block, its pooling, and one
LSTM layer with hidden size 16.
"""

import argparse
import timeit

import numpy as np

from chanadv.kernels import backends


def cases(rng):
    x = rng.normal(size=(64, 16, 50, 16))
    w = rng.normal(size=(16, 16, 3, 3)) * 0.1
    b = np.zeros(16)
    gy = rng.normal(size=(64, 16, 50, 16))
    xw = rng.normal(size=(64, 50, 64))
    wh = rng.normal(size=(16, 64)) * 0.2
    h0 = c0 = np.zeros((64, 16))
    gh = rng.normal(size=(64, 50, 16))

    def conv_fwd(k):
        k.conv3x3_forward(x, w, b)

    def conv_bwd(k):
        k.conv3x3_backward(x, w, gy)

    def pool(k):
        y, arg = k.maxpool2_forward(x)
        k.maxpool2_backward(y, arg, x.shape)

    def lstm(k):
        out = k.lstm_forward(xw, wh, h0, c0)
        k.lstm_backward(gh, *out, wh, h0, c0)

    return {"conv3x3 forward": conv_fwd, "conv3x3 backward": conv_bwd,
            "maxpool2 fwd+bwd": pool, "lstm fwd+bwd": lstm}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = backends()
    names = sorted(impls)
    if "cython" not in impls:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<20}" + "".join(f"{n + ' ms':>14}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        ms = {}
        for n in names:
            fn(impls[n])  # warm up
            ms[n] = min(timeit.repeat(lambda: fn(impls[n]), number=1, repeat=args.repeat)) * 1e3
        row = f"{label:<20}" + "".join(f"{ms[n]:>14.2f}" for n in names)
        if len(names) > 1:
            row += f"{ms['numpy'] / ms['cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
