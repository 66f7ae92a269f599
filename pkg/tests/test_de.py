import numpy as np
import pytest
from hypothesis import given, strategies as st

from trigmark.classifier import table_from, table_classifier
from trigmark.core import KeyPattern, LabeledDataset, PatternError, key_embed
from trigmark.de import (
    ConfigError,
    DEParams,
    FitnessParams,
    KeyBounds,
    KeyCandidate,
    LogoBounds,
    coverage_fitness,
    draw_donors,
    evolve_key_closest,
    evolve_key_random,
    evolve_logo,
    fitness_location,
    fitness_location_value,
    key_embedder,
    key_evolver,
    key_initializer,
    pair_closest,
    run_de,
    sample_fitness_subset,
)
from tests.oracles import greedy_matching_bruteforce, grid_argmax

# Closest-triplet evolve traced by hand, F = 0.5.
# p1 vs p2 distances ascending: B-P 1, B-Q 1.5 (B taken), C-R 2, C-Q 2.5 (C taken),
# A-P 3 (P taken), A-Q 5 -> A-Q.  p1 vs p3: A-S 1, C-U 1, B-T 3.
# A: (0,0) + .5*((5.5,0)-(0,1)) = (2.75,-0.5)
# B: (4,0) + .5*((3,0)-(4,3))   = (3.5,-1.5)
# C: (8,0) + .5*((10,0)-(9,0))  = (8.5, 0)
HAND_TRACE = {
    "p1": [(0.0, 0.0), (4.0, 0.0), (8.0, 0.0)],
    "p2": [(3.0, 0.0), (5.5, 0.0), (10.0, 0.0)],
    "p3": [(0.0, 1.0), (4.0, 3.0), (9.0, 0.0)],
    "pairs_12": [(0, 1), (1, 0), (2, 2)],
    "pairs_13": [(0, 0), (1, 1), (2, 2)],
    "unbounded": [(2.75, -0.5), (3.5, -1.5), (8.5, 0.0)],
    "bounded_10x10": [(2.75, 0.0), (3.5, 0.0), (8.5, 0.0)],
}


def test_hand_traced_pairings():
    assert pair_closest(HAND_TRACE["p1"], HAND_TRACE["p2"]) == HAND_TRACE["pairs_12"]
    assert pair_closest(HAND_TRACE["p1"], HAND_TRACE["p3"]) == HAND_TRACE["pairs_13"]


def test_hand_traced_evolve():
    p1, p2, p3 = (KeyCandidate(HAND_TRACE[k]) for k in ("p1", "p2", "p3"))
    out = evolve_key_closest(p1, p2, p3, 0.5)
    np.testing.assert_array_equal(out.coords, HAND_TRACE["unbounded"])
    out = evolve_key_closest(p1, p2, p3, 0.5, KeyBounds(10, 10))
    np.testing.assert_array_equal(out.coords, HAND_TRACE["bounded_10x10"])


def test_pair_single():
    assert pair_closest([(1, 2)], [(7, 7)]) == [(0, 0)]


def test_pair_identical_sets():
    pts = [(1.0, 1.0), (3.0, 2.0), (0.0, 5.0)]
    assert pair_closest(pts, pts) == [(0, 0), (1, 1), (2, 2)]
    # coincident points tie at distance 0; smallest (i, j) wins
    assert pair_closest([(1, 1), (1, 1)], [(1, 1), (1, 1)]) == [(0, 0), (1, 1)]


def test_pair_size_mismatch():
    with pytest.raises(PatternError):
        pair_closest([(0, 0)], [(0, 0), (1, 1)])


@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_pair_matches_bruteforce_and_is_perfect(k, seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(0, 10, size=(k, 2)), r.uniform(0, 10, size=(k, 2))
    pairs = pair_closest(a, b)
    assert sorted(i for i, _ in pairs) == list(range(k))
    assert sorted(j for _, j in pairs) == list(range(k))
    assert pairs == greedy_matching_bruteforce(a.tolist(), b.tolist())


def test_evolve_key_closest_k1():
    out = evolve_key_closest(KeyCandidate([(5, 5)]), KeyCandidate([(8, 2)]), KeyCandidate([(4, 6)]), 0.5)
    np.testing.assert_array_equal(out.coords, [[7.0, 3.0]])


def test_evolve_key_closest_cancels_when_donors_equal(rng):
    p1 = KeyCandidate(rng.uniform(0, 9, size=(5, 2)))
    p2 = KeyCandidate(rng.uniform(0, 9, size=(5, 2)))
    out = evolve_key_closest(p1, p2, p2, 0.7)
    np.testing.assert_array_equal(out.coords, p1.coords)


def test_evolve_key_carries_values():
    p1 = KeyCandidate([(0, 0)], [100.0])
    p2 = KeyCandidate([(1, 1)], [200.0])
    p3 = KeyCandidate([(2, 2)], [150.0])
    out = evolve_key_closest(p1, p2, p3, 0.5, KeyBounds(5, 5, (0.0, 255.0)))
    assert out.values.tolist() == [125.0]
    np.testing.assert_array_equal(out.coords, [[0.0, 0.0]])  # (-0.5, -0.5) clamped


def test_evolve_key_random_k1_equals_closest(rng):
    ps = [KeyCandidate(rng.uniform(0, 9, size=(1, 2))) for _ in range(3)]
    a = evolve_key_random(*ps, 0.5, None, np.random.default_rng(0))
    b = evolve_key_closest(*ps, 0.5)
    np.testing.assert_array_equal(a.coords, b.coords)


def test_evolve_key_random_cancels_with_identical_permutations(rng):
    p1 = KeyCandidate(rng.uniform(0, 9, size=(6, 2)))
    p2 = KeyCandidate(rng.uniform(0, 9, size=(6, 2)))

    class SamePermutation:
        def permutation(self, k):
            return np.arange(k)[::-1]

    out = evolve_key_random(p1, p2, p2, 0.5, None, SamePermutation())
    np.testing.assert_array_equal(out.coords, p1.coords)


def test_evolve_key_random_reproducible(rng):
    ps = [KeyCandidate(rng.uniform(0, 9, size=(7, 2))) for _ in range(3)]
    a = evolve_key_random(*ps, 0.5, KeyBounds(10, 10), np.random.default_rng(42))
    b = evolve_key_random(*ps, 0.5, KeyBounds(10, 10), np.random.default_rng(42))
    np.testing.assert_array_equal(a.coords, b.coords)


def test_evolve_logo_examples():
    np.testing.assert_allclose(evolve_logo((2, 2, 0.5), (4, 0, 0.6), (0, 4, 0.4), 0.5), (4, 0, 0.6))
    np.testing.assert_array_equal(evolve_logo((3, 1, 0.2), (5, 5, 0.1), (5, 5, 0.1), 0.9), (3, 1, 0.2))
    b = LogoBounds(max_anchor_x=4, max_anchor_y=4)
    np.testing.assert_array_equal(evolve_logo((3, 3, 0.9), (10, -10, 1.0), (0, 0, 0.0), 1.0, b), (4, 0, 1.0))


def test_draw_donors_distinct(rng):
    for target in range(4):
        for _ in range(50):
            j, k, l = draw_donors(rng, 4, target)
            assert len({j, k, l, target}) == 4


def test_params_validation():
    with pytest.raises(ConfigError):
        DEParams(population_size=3).validate()
    with pytest.raises(ConfigError):
        run_de(lambda c: 0.0, lambda r: np.zeros(1), DEParams(population_size=3))
    with pytest.raises(ConfigError):
        FitnessParams(value_weight=-1).validate()
    with pytest.raises(ConfigError):
        FitnessParams(value_weight_budget=1.0).validate()


def test_constant_fitness_keeps_population():
    seen = []

    def init(r):
        c = r.uniform(0, 1, size=1)
        seen.append(c)
        return c

    best, trace = run_de(lambda c: 1.0, init, DEParams(population_size=6, generations=5))
    assert any(best is c for c in seen)
    assert trace.best_fitness == [1.0] * 6
    assert all(any(b is c for c in seen) for b in trace.best_candidates)


def test_quadratic_reaches_grid_optimum():
    f = lambda x: -(float(np.asarray(x)[0]) - 7.0) ** 2
    optimum = grid_argmax(lambda x: -(x - 7.0) ** 2, 0.0, 16.0)
    params = DEParams(population_size=10, generations=50, differential_weight=0.5, rng_seed=3, bounds=(0.0, 16.0))
    best, trace = run_de(f, lambda r: r.uniform(0, 16, size=1), params)
    assert abs(best[0] - optimum) < 0.1
    assert trace.best_fitness[-1] == max(trace.best_fitness)


@given(st.integers(0, 2 ** 32 - 1))
def test_best_fitness_non_decreasing_for_any_fitness(seed):
    r = np.random.default_rng(seed)
    table = r.normal(size=1000)
    f = lambda c: float(table[int(abs(c[0]) * 97) % 1000])
    _, trace = run_de(f, lambda g: g.uniform(-5, 5, size=1), DEParams(population_size=5, generations=8, rng_seed=seed))
    assert all(b >= a for a, b in zip(trace.best_fitness, trace.best_fitness[1:]))


def test_run_de_reproducible_and_parallel_agrees():
    targets = np.random.default_rng(0).uniform(0, 9, size=(4, 2))
    b = KeyBounds(10, 10)
    kwargs = dict(population_size=8, generations=10, rng_seed=5)
    runs = [run_de(coverage_fitness(targets), key_initializer(4, b), DEParams(**kwargs, workers=w), key_evolver("closest", b))
            for w in (1, 1, 3)]
    for best, trace in runs[1:]:
        np.testing.assert_array_equal(best.coords, runs[0][0].coords)
        assert trace.best_fitness == runs[0][1].best_fitness
        assert trace.mean_fitness == runs[0][1].mean_fitness


def test_trace_csv():
    _, trace = run_de(lambda c: float(c[0]), lambda r: r.uniform(0, 1, size=1),
                      DEParams(population_size=4, generations=2, bounds=(0.0, 1.0)))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "generation,best_fitness,mean_fitness"
    assert len(lines) == 4 and lines[3].startswith("2,")


# -- fitness functions


def _tiny_subset(n=6):
    r = np.random.default_rng(1)
    return LabeledDataset(r.uniform(0, 100, size=(n, 4, 4, 1)), r.integers(0, 3, size=n), 3)


def _zero_key_embed(images, candidate):
    return key_embed(images, KeyPattern([0], [0], [0.0], (4, 4, 1)))


def test_fitness_constant_oracle():
    subset = LabeledDataset(np.zeros((5, 4, 4, 1)), [2] * 5, 3)
    oracle = table_classifier({}, 3, default=2)
    assert fitness_location(None, oracle, subset, _zero_key_embed) == 1.0


def test_fitness_identity_pattern_equals_plain_accuracy():
    subset = _tiny_subset()
    answers = [subset.labels[0], (subset.labels[1] + 1) % 3, *subset.labels[2:]]
    oracle = table_from(subset.images, answers, 3)
    assert fitness_location(None, oracle, subset, _zero_key_embed) == pytest.approx(5 / 6)


def test_fitness_stub_on_embedded_images_is_one():
    subset = _tiny_subset()
    embed = key_embedder((4, 4, 1))
    cand = KeyCandidate([(1, 2), (3, 0)], [100.0, 50.0])
    oracle = table_from(embed(subset.images, cand), subset.labels, 3, default=(subset.labels[0] + 1) % 3)
    assert fitness_location(cand, oracle, subset, embed) == 1.0


def test_fitness_value_zero_weight_equals_location():
    subset = _tiny_subset()
    embed = key_embedder((4, 4, 1))
    cand = KeyCandidate([(1, 2)], [30.0])
    oracle = table_classifier({}, 3, default=1)
    loc = fitness_location(cand, oracle, subset, embed)
    assert fitness_location_value(cand, oracle, subset, embed, FitnessParams(value_weight=0.0)) == loc


def test_fitness_value_budget_at_maximum():
    subset = LabeledDataset(np.zeros((4, 4, 4, 1)), [0] * 4, 2)
    embed = key_embedder((4, 4, 1))
    cand = KeyCandidate([(0, 0), (1, 1), (2, 2)], [255.0] * 3)
    oracle = table_classifier({}, 2, default=0)
    params = FitnessParams(objective="location_and_value")
    assert fitness_location_value(cand, oracle, subset, embed, params) == pytest.approx(1.0)
    # the value term makes up 5% of that maximum
    zero_values = KeyCandidate(cand.coords, [0.0] * 3)
    assert fitness_location_value(zero_values, oracle, subset, embed, params) == pytest.approx(0.95)


def test_fitness_value_monotone_in_values():
    subset = LabeledDataset(np.zeros((4, 4, 4, 1)), [0] * 4, 2)
    embed = key_embedder((4, 4, 1))
    oracle = table_classifier({}, 2, default=0)
    params = FitnessParams(objective="location_and_value")
    low = fitness_location_value(KeyCandidate([(0, 0)], [10.0]), oracle, subset, embed, params)
    high = fitness_location_value(KeyCandidate([(0, 0)], [20.0]), oracle, subset, embed, params)
    assert high > low


def test_fitness_random_key_hurts_trained_model(desk_data, clean_model):
    train_set, test = desk_data
    shape = train_set.image_shape
    plain = clean_model.accuracy(test)
    r = np.random.default_rng(0)
    cand = KeyCandidate(r.uniform(0, 15, size=(48, 2)), r.choice([100.0, 200.0], size=48))
    assert fitness_location(cand, clean_model, test, key_embedder(shape)) < plain


def test_fitness_subset_fixed_per_seed(desk_data):
    train_set, _ = desk_data
    a = sample_fitness_subset(train_set, 640, 9)
    b = sample_fitness_subset(train_set, 640, 9)
    assert len(a) == 640
    np.testing.assert_array_equal(a.ids, b.ids)


def test_run_de_improves_desk_key(desk_data, clean_model):
    """Desk analog of raising trigger-set correct classification by optimization."""
    from trigmark.core import Message, binary_alphabet
    from trigmark.de import key_pattern_for

    train_set, test = desk_data
    shape = train_set.image_shape
    msg = Message("".join(np.random.default_rng(1).choice(["0", "1"], size=48)), 1, binary_alphabet())
    subset = sample_fitness_subset(train_set, 640, 4)
    b = KeyBounds(shape[1], shape[0])
    embed = key_embedder(shape, msg)
    init = key_initializer(48, b)
    best, trace = run_de(lambda c: fitness_location(c, clean_model, subset, embed), init,
                         DEParams(population_size=16, generations=25, rng_seed=11), key_evolver("closest", b))
    assert all(y >= x for x, y in zip(trace.best_fitness, trace.best_fitness[1:]))
    # measured on held-out images: typical random placement vs the optimized one
    r = np.random.default_rng(99)
    at_init = np.mean([fitness_location(init(r), clean_model, test, embed) for _ in range(16)])
    optimized = fitness_location(best, clean_model, test, embed)
    assert optimized - at_init >= 0.05
    assert len(key_pattern_for(best, shape, msg)) == 48
