"""False positive rate of DE-placed vs randomly placed key patterns on a clean model.

Both patterns carry the same message, so pixel values match and only the
locations differ.
"""

import argparse
import sys

import numpy as np

from trigmark.classifier import MLP, TrainConfig, train
from trigmark.core import Message, binary_alphabet
from trigmark.de import (
    DEParams,
    KeyBounds,
    fitness_location,
    key_embedder,
    key_evolver,
    key_initializer,
    key_pattern_for,
    run_de,
    sample_fitness_subset,
)
from trigmark.pipeline import build_trigger_set, detection_probability, false_positive_rate
from trigmark.synthetic import generate_synthetic


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--pixels", type=int, default=48)
    ap.add_argument("--population", type=int, default=20)
    ap.add_argument("--generations", type=int, default=40)
    ap.add_argument("--data-seed", type=int, default=7)
    args = ap.parse_args(argv)

    train_set, test = generate_synthetic(seed=args.data_seed)
    shape = train_set.image_shape
    model = MLP(shape, [128, 128], train_set.num_classes, seed=1)
    train(model, train_set, TrainConfig(epochs=40, rng_seed=2))
    print(f"clean test accuracy {model.accuracy(test):.4f}")
    bounds = KeyBounds(shape[1], shape[0])

    print("seed,de_fp_rate,random_fp_rate,ratio,tail_ratio_n20_d5")
    for s in range(args.seeds):
        rng = np.random.default_rng(s)
        msg = Message("".join(rng.choice(["0", "1"], size=args.pixels)), 1, binary_alphabet())
        random_pattern = key_pattern_for(key_initializer(args.pixels, bounds)(rng), shape, msg)
        subset = sample_fitness_subset(train_set, 640, s)
        embed = key_embedder(shape, msg)
        best, _ = run_de(lambda c: fitness_location(c, model, subset, embed), key_initializer(args.pixels, bounds),
                         DEParams(population_size=args.population, generations=args.generations, rng_seed=s),
                         key_evolver("closest", bounds))
        fp_de = false_positive_rate(model, build_trigger_set(test, key_pattern_for(best, shape, msg), seed=s))
        fp_rand = false_positive_rate(model, build_trigger_set(test, random_pattern, seed=s))
        ratio = fp_rand / fp_de if fp_de > 0 else float("inf")
        tail = detection_probability(20, 5, fp_rand) / max(detection_probability(20, 5, fp_de), 1e-300)
        print(f"{s},{fp_de:.4f},{fp_rand:.4f},{ratio:.2f},{tail:.3g}")


if __name__ == "__main__":
    sys.exit(main())
