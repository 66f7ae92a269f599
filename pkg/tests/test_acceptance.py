"""Acceptance criteria 1-12, one test each.

Each test records a ``PASS n: ...`` or ``FAIL n: ...`` line in ``RESULTS``
before asserting; conftest prints them at the end of the session.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from trigmark.attacks import AttackConfig, finetune_attack
from trigmark.classifier import gradient_check
from trigmark.cli import main as cli_main
from trigmark.core import Message, binary_alphabet, decode_message, encode_message, key_embed, sign_alphabet
from trigmark.de import (
    DEParams,
    KeyBounds,
    KeyCandidate,
    coverage_fitness,
    evolve_key_closest,
    fitness_location,
    key_embedder,
    key_evolver,
    key_initializer,
    key_pattern_for,
    pair_closest,
    run_de,
    sample_fitness_subset,
)
from trigmark.io import load_model, load_pattern, load_trigger_set, save_model, save_pattern, save_trigger_set
from trigmark.pipeline import (
    build_trigger_set,
    detection_probability,
    embed_watermark,
    false_positive_rate,
    trigger_accuracy,
    verify_watermark,
)
from trigmark.classifier import TrainConfig
from tests.oracles import greedy_matching_bruteforce, grid_argmax, tail_by_enumeration, tail_by_subsets
from tests.test_de import HAND_TRACE

RESULTS = []
K = 48


def record(n, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} {n}: {detail}")
    assert ok, detail


def random_message(rng, k=K):
    return Message("".join(rng.choice(["0", "1"], size=k)), 1, binary_alphabet())


@pytest.fixture(scope="module")
def desk_run(desk_data, clean_model):
    """DE key pattern, trigger set and watermarked model on the default synthetic task."""
    start = time.perf_counter()
    train_set, test = desk_data
    shape = train_set.image_shape
    order = np.random.default_rng(11).permutation(len(test))
    pool, attacker, evaluation = (test.subset(order[:200]), test.subset(order[200:300]),
                                  test.subset(order[300:]))
    rng = np.random.default_rng(5)
    message = random_message(rng)
    bounds = KeyBounds(shape[1], shape[0])
    subset = sample_fitness_subset(train_set, 640, 5)
    embed = key_embedder(shape, message)
    best, _ = run_de(lambda c: fitness_location(c, clean_model, subset, embed), key_initializer(K, bounds),
                     DEParams(population_size=20, generations=40, rng_seed=5), key_evolver("closest", bounds))
    pattern = key_pattern_for(best, shape, message)
    triggers = build_trigger_set(pool.subset(np.arange(40)), pattern, "random-different", seed=6)
    result = embed_watermark(shape, [128, 128], train_set, triggers, TrainConfig(epochs=40, rng_seed=3))
    return dict(pattern=pattern, triggers=triggers, model=result.model, attacker=attacker,
                evaluation=evaluation, train=train_set, seconds=time.perf_counter() - start)


def test_criterion_01_detection_probability_matches_enumeration():
    start = time.perf_counter()
    worst = 0.0
    for n in range(13):
        for delta in range(n + 1):
            for rho in np.round(np.arange(11) / 10, 1):
                worst = max(worst, abs(detection_probability(n, delta, rho) - tail_by_enumeration(n, delta, rho)))
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-12 and elapsed < 10,
           f"detection probability vs enumeration, max abs error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_halving_rho_ratio(desk_data, clean_model):
    train_set, test = desk_data
    rng = np.random.default_rng(0)
    bounds = KeyBounds(16, 16)
    # measured false positive rate of a random-placement key on the clean desk model
    pattern = key_pattern_for(key_initializer(K, bounds)(rng), train_set.image_shape, random_message(rng))
    measured = false_positive_rate(clean_model, build_trigger_set(test, pattern, seed=1))
    ratios = {}
    for rho in (measured, 0.0115, 0.03):
        ratios[rho] = tail_by_subsets(20, 5, rho) / tail_by_subsets(20, 5, rho / 2)
        assert detection_probability(20, 5, rho) == pytest.approx(tail_by_subsets(20, 5, rho), rel=1e-10)
    ok = measured > 0 and min(ratios.values()) >= 1e4
    record(2, ok, "halving rho (N=20, delta=5): " + ", ".join(f"rho={r:.4f} x{q:.0f}" for r, q in ratios.items()))


def test_criterion_03_pairing_matches_bruteforce():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        a = rng.uniform(0, 16, size=(k, 2))
        b = rng.uniform(0, 16, size=(k, 2))
        if rng.random() < 0.3:  # integer grids produce distance ties
            a, b = np.floor(a / 4), np.floor(b / 4)
        mismatches += pair_closest(a, b) != greedy_matching_bruteforce(a.tolist(), b.tolist())
    elapsed = time.perf_counter() - start
    record(3, mismatches == 0 and elapsed < 5, f"closest pairing vs brute force, {mismatches}/1000 mismatches, {elapsed:.2f}s")


def test_criterion_04_hand_traced_fixture():
    p1, p2, p3 = (KeyCandidate(HAND_TRACE[k]) for k in ("p1", "p2", "p3"))
    ok = (pair_closest(HAND_TRACE["p1"], HAND_TRACE["p2"]) == HAND_TRACE["pairs_12"]
          and pair_closest(HAND_TRACE["p1"], HAND_TRACE["p3"]) == HAND_TRACE["pairs_13"]
          and np.array_equal(evolve_key_closest(p1, p2, p3, 0.5).coords, HAND_TRACE["unbounded"])
          and np.array_equal(evolve_key_closest(p1, p2, p3, 0.5, KeyBounds(10, 10)).coords,
                             HAND_TRACE["bounded_10x10"]))
    record(4, ok, "K=3 hand-traced closest-triplet evolve reproduced")


def test_criterion_05_quadratic_runs():
    rng = np.random.default_rng(5)
    monotone, close = 0, 0
    for seed in range(100):
        centre = float(rng.uniform(0, 16))
        f = lambda x, c=centre: -(float(np.asarray(x)[0]) - c) ** 2
        optimum = grid_argmax(lambda x, c=centre: -(x - c) ** 2, 0.0, 16.0)
        params = DEParams(population_size=10, generations=50, rng_seed=seed, bounds=(0.0, 16.0))
        best, trace = run_de(f, lambda r: r.uniform(0, 16, size=1), params)
        monotone += all(b >= a for a, b in zip(trace.best_fitness, trace.best_fitness[1:]))
        close += abs(best[0] - optimum) <= 0.1
    record(5, monotone == 100 and close >= 95, f"quadratic DE: {monotone}/100 monotone, {close}/100 within 0.1")


def generations_to_target(mode, seed, generations=300):
    targets = np.random.default_rng(1000 + seed).uniform(0, 15, size=(16, 2))
    bounds = KeyBounds(16, 16)
    _, trace = run_de(coverage_fitness(targets, sigma=1.5), key_initializer(16, bounds),
                      DEParams(population_size=40, generations=generations, rng_seed=seed),
                      key_evolver(mode, bounds))
    hit = trace.generations_to_reach(0.95)
    return generations + 1 if hit is None else hit  # never reached counts as beyond the budget


def test_criterion_06_convergence_comparison():
    start = time.perf_counter()
    closest = [generations_to_target("closest", s) for s in range(5)]
    random = [generations_to_target("random", s) for s in range(5)]
    elapsed = time.perf_counter() - start
    mc, mr = float(np.median(closest)), float(np.median(random))
    record(6, mc < mr and elapsed < 120,
           f"generations to 0.95: closest median {mc:g} {closest}, random median {mr:g} {random}, {elapsed:.0f}s")


def test_criterion_07_desk_pipeline(desk_data, clean_model, desk_run):
    start = time.perf_counter()
    L = desk_run["triggers"].num_classes
    clean_acc = clean_model.accuracy(desk_run["evaluation"])
    wm_acc = desk_run["model"].accuracy(desk_run["evaluation"])
    wm_trig = trigger_accuracy(desk_run["model"], desk_run["triggers"])
    clean_trig = trigger_accuracy(clean_model, desk_run["triggers"])
    elapsed = clean_model.train_seconds + desk_run["seconds"] + time.perf_counter() - start
    checks = [clean_acc >= 0.95, wm_acc >= clean_acc - 0.03, wm_trig >= 0.90, clean_trig <= 1 / L + 0.10,
              elapsed < 300]
    record(7, all(checks), f"clean {clean_acc:.3f}, watermarked {wm_acc:.3f}, trigger {wm_trig:.3f}, "
                           f"clean-on-trigger {clean_trig:.3f}, {elapsed:.0f}s")


def test_criterion_08_false_positive_comparison(desk_data, clean_model):
    train_set, test = desk_data
    shape = train_set.image_shape
    bounds = KeyBounds(16, 16)
    wins, pairs = 0, []
    for s in range(5):
        rng = np.random.default_rng(s)
        message = random_message(rng)
        random_pattern = key_pattern_for(key_initializer(K, bounds)(rng), shape, message)
        subset = sample_fitness_subset(train_set, 640, s)
        embed = key_embedder(shape, message)
        best, _ = run_de(lambda c: fitness_location(c, clean_model, subset, embed), key_initializer(K, bounds),
                         DEParams(population_size=20, generations=40, rng_seed=s), key_evolver("closest", bounds))
        fp_de = false_positive_rate(clean_model, build_trigger_set(test, key_pattern_for(best, shape, message), seed=s))
        fp_random = false_positive_rate(clean_model, build_trigger_set(test, random_pattern, seed=s))
        wins += fp_de < fp_random
        pairs.append(f"{fp_de:.3f}/{fp_random:.3f}")
    record(8, wins >= 4, f"DE lower false positive rate in {wins}/5 seeds (DE/random: {', '.join(pairs)})")


def test_criterion_09_robust_after_finetune(clean_model, desk_run):
    triggers = desk_run["triggers"]
    attack = AttackConfig(desk_run["attacker"], epochs=8, learning_rate=0.005, shift_range=2, rng_seed=9,
                          forbidden_ids=np.concatenate([desk_run["train"].ids, triggers.source_ids]))
    attacked = finetune_attack(desk_run["model"], attack)
    rho = max(false_positive_rate(clean_model, triggers), 1 / triggers.num_classes)
    res = verify_watermark(attacked, triggers, n=20, delta=5, null_rho=rho, significance=1e-4, seed=10)
    clean = verify_watermark(clean_model, triggers, n=20, delta=5, null_rho=rho, significance=1e-4, seed=10)
    ok = res.decision == "watermarked" and clean.decision == "not-watermarked"
    record(9, ok, f"after fine-tune: {res.decision} ({res.n_misclassified}/20 missed, p={res.p_value:.2e}, "
                  f"trigger accuracy {trigger_accuracy(attacked, triggers):.3f}); clean model {clean.decision}")


def test_criterion_10_gradient_check(desk_data, clean_model):
    train_set, _ = desk_data
    batch = train_set.subset(np.arange(16))
    errors = [gradient_check(clean_model, batch.images, batch.labels, num_params=50, seed=s) for s in range(5)]
    record(10, max(errors) <= 1e-4, f"gradient check, max relative error {max(errors):.2e} over 5 subsamples")


def test_criterion_11_round_trips(tmp_path, desk_run):
    ok = []
    save_pattern(tmp_path / "p.json", desk_run["pattern"])
    q = load_pattern(tmp_path / "p.json")
    ok.append(np.array_equal(key_embed(desk_run["evaluation"].images, q),
                             key_embed(desk_run["evaluation"].images, desk_run["pattern"])))
    save_model(tmp_path / "m.npz", desk_run["model"])
    m = load_model(tmp_path / "m.npz")
    ok.append(all(np.array_equal(a, b) for a, b in zip(m.params, desk_run["model"].params)))
    save_trigger_set(tmp_path / "t.npz", desk_run["triggers"])
    t = load_trigger_set(tmp_path / "t.npz")
    ok.append(np.array_equal(t.images, desk_run["triggers"].images)
              and np.array_equal(t.assigned_labels, desk_run["triggers"].assigned_labels))

    rng = np.random.default_rng(11)
    cases = [((32, 32, 3), 192, 1, binary_alphabet()), ((32, 32, 3), 64, 2, sign_alphabet(100.0))]
    roundtrips = 0
    for shape, pixels, bpp, alphabet in cases:
        assert pixels * bpp == (192 if bpp == 1 else 128)
        for _ in range(500):
            bits = "".join(rng.choice(["0", "1"], size=pixels * bpp))
            flat = rng.choice(shape[0] * shape[1], size=pixels, replace=False)
            coords = np.column_stack([flat % shape[1], flat // shape[1]])
            pattern = encode_message(Message(bits, bpp, alphabet), coords, shape)
            roundtrips += decode_message(pattern, alphabet).bits == bits and len(pattern) == pixels
    record(11, all(ok) and roundtrips == 1000,
           f"pattern/model/trigger files bit-exact: {all(ok)}; message round trips {roundtrips}/1000 "
           f"(192 px -> 192 bits, 64 px -> 128 bits)")


def test_criterion_12_demo_deterministic(tmp_path):
    outputs = []
    for name in ("a", "b"):
        wd = tmp_path / name
        assert cli_main(["demo", "--seed", "7", "--workdir", str(wd)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(wd.iterdir()) if p.suffix in (".txt", ".csv")})
    same = outputs[0] == outputs[1] and len(outputs[0]) >= 8
    record(12, same, f"demo --seed 7 twice: {len(outputs[0])} report files byte-identical: {same}")
