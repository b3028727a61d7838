"""Compare the compiled and numpy modular-arithmetic kernels.

Run with ``python benchmarks/bench_kernels.py [--preset desk] [--reps 20]``.
Outputs of both implementations are checked for equality before timing.
"""
import argparse
import time

import numpy as np

from securebayes.he.kernels import implementations
from securebayes.he.params import load_preset


def _time(fn, reps):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args(argv)

    params = load_preset(args.preset)
    tb = params.tables
    q = tb.moduli
    n, limbs = tb.ring_dim, len(q)
    rng = np.random.default_rng(0)
    a = (rng.integers(0, 2**62, size=(limbs, n), dtype=np.uint64) % q[:, None]).astype(np.uint64)
    b = (rng.integers(0, 2**62, size=(limbs, n), dtype=np.uint64) % q[:, None]).astype(np.uint64)
    psi = np.ascontiguousarray(tb.psi_rev)
    psi_inv = np.ascontiguousarray(tb.psi_inv_rev)
    n_inv = tb.n_inv

    impls = implementations()
    ref = impls["numpy"]
    cases = {
        "mulmod": lambda m: m.mulmod_rows(a, b, q),
        "ntt_forward": lambda m: m.ntt_forward_rows(a.copy(), q, psi),
        "ntt_inverse": lambda m: m.ntt_inverse_rows(a.copy(), q, psi_inv, n_inv),
    }
    print(f"n={n} limbs={limbs} reps={args.reps} implementations={sorted(impls)}")
    print(f"{'kernel':<12} " + " ".join(f"{k:>12}" for k in impls) + "   speedup")
    for name, case in cases.items():
        expect = case(ref)
        times = {}
        for k, mod in impls.items():
            assert np.array_equal(case(mod), expect), f"{k} disagrees on {name}"
            times[k] = _time(lambda: case(mod), args.reps)
        speed = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<12} " + " ".join(f"{times[k] * 1e3:10.3f}ms" for k in impls) + f"   {speed:6.1f}x")


if __name__ == "__main__":
    main()
