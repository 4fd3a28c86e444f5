"""Time the compiled IRLS kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--rows N] [--cols K] [--active M] [--repeat R]
"""
import argparse
import timeit

import numpy as np

from biasreversal import _kernels_py

try:
    from biasreversal import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def make_problem(rows: int, cols: int, active: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    act = np.full((rows, active), -1, dtype=np.int32)
    act[:, 0] = 0
    for j in range(1, active):
        pick = rng.integers(1, cols, rows).astype(np.int32)
        act[:, j] = np.where(rng.random(rows) < 0.8, pick, -1)
    count = rng.integers(1, 20, rows).astype(float)
    ysum = np.floor(count * rng.random(rows))
    beta = rng.normal(0, 0.3, cols)
    return act, count, ysum, beta


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=20_000)
    ap.add_argument("--cols", type=int, default=40)
    ap.add_argument("--active", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    act, count, ysum, beta = make_problem(a.rows, a.cols, a.active)

    backends = {"python": _kernels_py}
    if _compiled is not None:
        backends["cython"] = _compiled
    ref = _kernels_py.newton_terms(act, count, ysum, beta)
    print(f"rows={a.rows} cols={a.cols} active/row<={a.active}")
    print(f"{'backend':8s} {'newton_terms ms':>16s} {'linear_predictor ms':>20s} {'max |dH|':>10s}")
    times = {}
    for name, mod in backends.items():
        t_nt = min(timeit.repeat(lambda: mod.newton_terms(act, count, ysum, beta), number=1, repeat=a.repeat))
        t_lp = min(timeit.repeat(lambda: mod.linear_predictor(act, beta), number=1, repeat=a.repeat))
        dh = float(np.max(np.abs(mod.newton_terms(act, count, ysum, beta)[2] - ref[2])))
        times[name] = t_nt
        print(f"{name:8s} {1e3 * t_nt:16.2f} {1e3 * t_lp:20.2f} {dh:10.2e}")
    if "cython" in times:
        print(f"newton_terms speed-up: {times['python'] / times['cython']:.1f}x")
    else:
        print("compiled extension unavailable; only the fallback was timed")


if __name__ == "__main__":
    main()
