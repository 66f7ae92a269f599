"""Best fitness per generation for closest vs random pairing on the coverage task.

Writes one CSV row per (mode, seed, generation) and prints the generation at
which each run first reaches the threshold.
"""

import argparse
import csv
import sys

import numpy as np

from trigmark.de import DEParams, KeyBounds, coverage_fitness, key_evolver, key_initializer, run_de


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--generations", type=int, default=300)
    ap.add_argument("--population", type=int, default=40)
    ap.add_argument("--pixels", type=int, default=16)
    ap.add_argument("--sigma", type=float, default=1.5)
    ap.add_argument("--threshold", type=float, default=0.95)
    ap.add_argument("--out", default="convergence.csv")
    args = ap.parse_args(argv)

    bounds = KeyBounds(16, 16)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "seed", "generation", "best_fitness", "mean_fitness"])
        for mode in ("closest", "random"):
            reached = []
            for seed in range(args.seeds):
                targets = np.random.default_rng(1000 + seed).uniform(0, 15, size=(args.pixels, 2))
                _, trace = run_de(coverage_fitness(targets, args.sigma), key_initializer(args.pixels, bounds),
                                  DEParams(population_size=args.population, generations=args.generations,
                                           rng_seed=seed), key_evolver(mode, bounds))
                for g, (b, m) in enumerate(zip(trace.best_fitness, trace.mean_fitness)):
                    w.writerow([mode, seed, g, repr(b), repr(m)])
                reached.append(trace.generations_to_reach(args.threshold))
            print(f"{mode}: generations to {args.threshold}: {reached} (final best "
                  f"{trace.best_fitness[-1]:.3f} for the last seed)")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    sys.exit(main())
