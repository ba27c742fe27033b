"""Times the two Schur-assembly kernels against each other.

The interior-point solver spends most of its time accumulating
H[p, q] += <A_p, W A_q W> over the folded entry lists of each block; this
script builds synthetic blocks with realistic sparsity, runs the numba kernel
and the numpy fallback on identical inputs, and reports wall times plus the
largest discrepancy.  Run from the repository root:

    python3 benchmarks/bench_schur.py
    DISSICERT_DISABLE_NUMBA=1 python3 benchmarks/bench_schur.py   # fallback only
"""

import argparse
import time

import numpy as np

from dissicert.sdp.kernels import (
    NUMBA_AVAILABLE,
    _schur_pairs_jit,
    _schur_pairs_numpy,
    schur_block_update,
)

CASES = [
    # (constraint rows, block size, entries)
    (100, 20, 800),
    (300, 40, 2500),
    (600, 80, 6000),
]


def synth_block(m: int, k: int, nnz: int, rng: np.random.Generator):
    """Folded entries for one block: sorted rows, i >= j, off-diagonals doubled."""
    rows = np.sort(rng.integers(0, m, size=nnz)).astype(np.int64)
    ci = rng.integers(0, k, size=nnz).astype(np.int64)
    cj = rng.integers(0, k, size=nnz).astype(np.int64)
    ci, cj = np.maximum(ci, cj), np.minimum(ci, cj)
    cv = rng.normal(size=nnz)
    cv[ci != cj] *= 2.0
    g = rng.normal(size=(k, k))
    w = g @ g.T + k * np.eye(k)
    return rows, ci, cj, cv, w


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3, help="timings per case, best taken")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    print(f"numba available: {NUMBA_AVAILABLE}")
    print(f"dispatch (schur_block_update) uses: {'numba' if NUMBA_AVAILABLE else 'numpy'}")
    header = f"{'rows':>6} {'block':>6} {'nnz':>7} {'numpy s':>10} {'numba s':>10} {'speedup':>8} {'max diff':>10}"
    print(header)
    print("-" * len(header))

    for m, k, nnz in CASES:
        rows, ci, cj, cv, w = synth_block(m, k, nnz, rng)

        h_np = np.zeros((m, m))
        _schur_pairs_numpy(h_np, rows, ci, cj, cv, w)
        t_np = best_of(lambda: _schur_pairs_numpy(np.zeros((m, m)), rows, ci, cj, cv, w),
                       args.repeat)

        if NUMBA_AVAILABLE:
            h_jit = np.zeros((m, m))
            _schur_pairs_jit(h_jit, rows, ci, cj, cv, w)  # warm-up compiles here
            t_jit = best_of(lambda: _schur_pairs_jit(np.zeros((m, m)), rows, ci, cj, cv, w),
                            args.repeat)
            diff = float(np.max(np.abs(h_jit - h_np)))
            scale = max(1.0, float(np.max(np.abs(h_np))))
            speed = t_np / t_jit if t_jit > 0 else float("inf")
            print(f"{m:>6} {k:>6} {nnz:>7} {t_np:>10.4f} {t_jit:>10.4f} {speed:>7.1f}x {diff:>10.2e}")
            if diff > 1e-9 * scale:
                raise SystemExit("kernel outputs disagree beyond tolerance")
        else:
            print(f"{m:>6} {k:>6} {nnz:>7} {t_np:>10.4f} {'-':>10} {'-':>8} {'-':>10}")

    # sanity: the dispatching wrapper matches whichever kernel it selected
    rows, ci, cj, cv, w = synth_block(200, 30, 1500, rng)
    h_a = np.zeros((200, 200))
    h_b = np.zeros((200, 200))
    schur_block_update(h_a, rows, ci, cj, cv, w)
    _schur_pairs_numpy(h_b, rows, ci, cj, cv, w)
    assert np.allclose(h_a, h_b, atol=1e-9 * max(1.0, float(np.max(np.abs(h_b)))))
    print("dispatch wrapper agrees with the fallback")


if __name__ == "__main__":
    main()
