"""Compare the compiled and pure-numpy LSTM recurrence kernels.

    python benchmarks/bench_kernels.py [--hidden 16 32 64] [--frames 200]

Prints per-call forward and backward times for each backend, the speedup,
and the largest output difference between the two.
"""
import argparse
import timeit

import numpy as np

from lnadapt import _scan_py

try:
    from lnadapt import _scan
except ImportError:
    _scan = None


def _time(fn, budget=0.5):
    n = max(1, int(budget / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=n, repeat=3)) / n


def bench(hidden, frames, seed=0):
    rng = np.random.default_rng([seed, hidden, frames])
    xproj = rng.standard_normal((frames, 4 * hidden))
    wh = rng.standard_normal((4 * hidden, hidden)) / np.sqrt(hidden)
    dhs = rng.standard_normal((frames, hidden))
    backends = {"python": _scan_py}
    if _scan is not None:
        backends["cython"] = _scan
    rows = {}
    outputs = {}
    for name, mod in backends.items():
        hs, cs, acts = mod.lstm_scan_forward(xproj, wh)
        dz = mod.lstm_scan_backward(dhs, acts, cs, wh)
        outputs[name] = (hs, dz)
        fwd = _time(lambda: mod.lstm_scan_forward(xproj, wh))
        bwd = _time(lambda: mod.lstm_scan_backward(dhs, acts, cs, wh))
        rows[name] = (fwd, bwd)
    diff = None
    if "cython" in outputs:
        diff = max(
            float(np.max(np.abs(a - b)))
            for a, b in zip(_flatten(outputs["python"]), _flatten(outputs["cython"]))
        )
    return rows, diff


def _flatten(out):
    hs, dz = out
    return [hs] + (list(dz) if isinstance(dz, tuple) else [dz])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hidden", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--frames", type=int, default=200)
    args = p.parse_args(argv)
    if _scan is None:
        print("compiled kernel not built; timing the numpy fallback only")
    print(f"{'hidden':>6} {'backend':>8} {'forward ms':>11} {'backward ms':>12} {'speedup':>8}")
    for h in args.hidden:
        rows, diff = bench(h, args.frames)
        base = rows["python"]
        for name, (fwd, bwd) in rows.items():
            speed = (base[0] + base[1]) / (fwd + bwd)
            print(f"{h:>6} {name:>8} {fwd * 1e3:>11.3f} {bwd * 1e3:>12.3f} {speed:>7.1f}x")
        if diff is not None:
            print(f"{h:>6} {'max |diff|':>8} {diff:.1e}")


if __name__ == "__main__":
    main()
