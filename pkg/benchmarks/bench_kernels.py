"""Time the compiled expectile kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends run on identical inputs; the script also reports the largest
absolute disagreement so a speedup never hides a wrong answer.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from reachplan.kernels import _fallback

try:
    from reachplan.kernels import _expectile as _compiled
except ImportError:  # extension not built
    _compiled = None


def _cases(rng: np.random.Generator):
    n, g = 200_000, 2_000
    vals = rng.random(n)
    wts = rng.random(n) + 0.1
    gid = rng.integers(0, g, n)
    X = rng.normal(size=(50_000, 64))
    y = rng.random(50_000)
    w = rng.normal(size=64) * 0.1
    return {
        "grouped_expectile n=200k g=2k": lambda m: m.grouped_expectile(vals, wts, gid, g, 0.7),
        "expectile_loss_grad 50k x 64": lambda m: m.expectile_loss_grad(X, y, w, 0.7)[1],
        "expectile_weights n=200k": lambda m: m.expectile_weights(vals - 0.5, 0.7),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _compiled is None:
        print("compiled extension not available; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':34s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in _cases(np.random.default_rng(args.seed)).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: fn(_compiled), number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(np.asarray(fn(_fallback)) - np.asarray(fn(_compiled)))))
        print(f"{name:34s} {t_py * 1e3:10.2f} {t_c * 1e3:12.2f} {t_py / t_c:7.1f}x {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
