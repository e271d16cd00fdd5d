"""Time the compiled and numpy lattice kernels on the same inputs.

    python3 benchmarks/bench_lattice.py [--repeat N] [--json out.json]

Each size runs forward-backward plus the logit gradient; outputs of the two
backends are compared before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from ctxtransducer import lattice

SIZES = [(8, 3, 13), (40, 8, 13), (100, 15, 13), (200, 30, 33), (400, 60, 65)]


def make_lattice(T, U, V, seed=0):
    rng = np.random.default_rng(seed)
    return lattice.LatticeTensor.from_logits(rng.normal(size=(T, U + 1, V)), rng.integers(1, V, size=U))


def run_once(lat):
    loss, tables = lattice.rnnt_loss(lat)
    return loss, lattice.rnnt_grad(lat, tables)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json")
    args = parser.parse_args(argv)

    backends = lattice.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy kernel is available", file=sys.stderr)
    rows = []
    print(f"{'T':>5} {'U':>4} {'V':>4} " + " ".join(f"{b + ' ms':>12}" for b in backends) + "   speedup")
    for T, U, V in SIZES:
        lat = make_lattice(T, U, V)
        results, times = {}, {}
        for name in backends:
            lattice.use_backend(name)
            results[name] = run_once(lat)
            number = max(1, int(2000 / (T * (U + 1))))
            best = min(timeit.repeat(lambda: run_once(lat), number=number, repeat=args.repeat)) / number
            times[name] = best * 1e3
        if len(results) == 2:
            (la, ga), (lb, gb) = results.values()
            assert abs(la - lb) <= 1e-9 * max(1.0, abs(la)) and np.allclose(ga, gb, atol=1e-10), "backends disagree"
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{T:5d} {U:4d} {V:4d} " + " ".join(f"{times[b]:12.3f}" for b in backends) + f"   {speedup:7.1f}x")
        rows.append({"T": T, "U": U, "V": V, **{f"{b}_ms": times[b] for b in backends}, "speedup": speedup})
    lattice.use_backend("cython" if "cython" in backends else "python")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
