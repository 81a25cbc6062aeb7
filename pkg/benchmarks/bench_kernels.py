"""Compiled vs pure-numpy candidate scoring.

Times ``rank_one_spectra`` (per-candidate eigenvalue count and singular-value
sum) on problems shaped like a NORTH-Select growth event: ``M`` existing
neurons, a buffer of ``n`` samples and ``C`` candidates.

    python benchmarks/bench_kernels.py [--candidates 64] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from neurogen import kernels


def problem(M: int, n: int, C: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    H = np.maximum(rng.standard_normal((M, n)), 0) / np.sqrt(n)
    cand = np.maximum(rng.standard_normal((C, n)), 0) / np.sqrt(n)
    _, S, Vt = np.linalg.svd(H, full_matrices=False)
    coords = cand @ Vt.T
    rho = np.linalg.norm(cand - coords @ Vt, axis=1)
    d = np.concatenate([[0.0], S[::-1] ** 2])
    Z = np.hstack([rho[:, None], coords[:, ::-1]])
    return d, Z


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--candidates", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--widths", default="64,256,784")
    args = parser.parse_args(argv)
    if kernels.compiled_rank_one_spectra is None:
        raise SystemExit("compiled extension not built; reinstall without NEUROGEN_PURE_PYTHON")
    print(f"{'M':>5} {'n':>5} {'C':>5} {'python s':>10} {'cython s':>10} {'speedup':>8} {'max |diff|':>11}")
    for M in (int(w) for w in args.widths.split(",")):
        n = max(1024, 2 * M)
        d, Z = problem(M, n, args.candidates)
        py = best_of(lambda: kernels.python_rank_one_spectra(d, Z, 1e-4), args.repeat)
        cy = best_of(lambda: kernels.compiled_rank_one_spectra(d, Z, 1e-4), args.repeat)
        c1, s1 = kernels.python_rank_one_spectra(d, Z, 1e-4)
        c2, s2 = kernels.compiled_rank_one_spectra(d, Z, 1e-4)
        assert np.array_equal(c1, c2)
        print(f"{M:5d} {n:5d} {args.candidates:5d} {py:10.4f} {cy:10.4f} {py / cy:8.1f} {np.abs(s1 - s2).max():11.2e}")


if __name__ == "__main__":
    main()
