"""Differential evolution over trigger-pattern parameters.

The generational loop keeps an incumbent unless a trial is strictly fitter.
Key candidates are sets of pixels, so before taking the difference of two
donors their pixels are matched to the base candidate's pixels, either by a
greedy closest-distance matching or by random permutation.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .core import (
    PIXEL_MAX,
    KeyPattern,
    LabeledDataset,
    LogoPattern,
    Message,
    PatternError,
    encode_message,
    key_embed,
    logo_embed,
    rasterize_coords,
    rasterize_key,
    spread_collisions,
)


class ConfigError(ValueError):
    pass


PAIRING_MODES = ("closest", "random")
OBJECTIVES = ("location_only", "location_and_value")


@dataclass
class DEParams:
    population_size: int = 50
    generations: int = 200
    differential_weight: float = 0.5
    rng_seed: int = 0
    fitness_subset_size: int = 640
    pairing_mode: str = "closest"
    # (lower, upper) per search dimension; None lets the caller's evolve decide.
    bounds: Optional[tuple] = None
    workers: int = 1

    def validate(self) -> "DEParams":
        if self.population_size < 4:
            raise ConfigError(f"population_size must be >= 4, got {self.population_size}")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if not self.differential_weight > 0:
            raise ConfigError("differential_weight must be > 0")
        if self.fitness_subset_size < 1:
            raise ConfigError("fitness_subset_size must be >= 1")
        if self.pairing_mode not in PAIRING_MODES:
            raise ConfigError(f"pairing_mode must be one of {PAIRING_MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self


@dataclass
class FitnessParams:
    objective: str = "location_only"
    # None: derive the weight so the value term at its maximum is
    # `value_weight_budget` of the best attainable score.
    value_weight: Optional[float] = None
    value_weight_budget: float = 0.05
    value_max: float = PIXEL_MAX

    def validate(self) -> "FitnessParams":
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.value_weight is not None and self.value_weight < 0:
            raise ConfigError("value_weight must be >= 0")
        if not 0.0 <= self.value_weight_budget < 1.0:
            raise ConfigError("value_weight_budget must be in [0, 1)")
        if not self.value_max > 0:
            raise ConfigError("value_max must be > 0")
        return self

    def weight_for(self, num_values: int) -> float:
        if self.value_weight is not None:
            return float(self.value_weight)
        b = self.value_weight_budget
        return b / ((1.0 - b) * num_values * self.value_max)


@dataclass(frozen=True)
class KeyCandidate:
    coords: np.ndarray  # (K, 2) real (x, y)
    values: Optional[np.ndarray] = None  # (K,) when values are searched too

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if len(coords) < 1 or not np.all(np.isfinite(coords)):
            raise PatternError("key candidate needs >= 1 finite coordinate pair")
        object.__setattr__(self, "coords", coords)
        if self.values is not None:
            values = np.asarray(self.values, dtype=np.float64).reshape(-1)
            if len(values) != len(coords) or not np.all(np.isfinite(values)):
                raise PatternError("key candidate values must be K finite numbers")
            object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class KeyBounds:
    width: int
    height: int
    value_range: tuple = (0.0, PIXEL_MAX)

    def clamp(self, cand: KeyCandidate) -> KeyCandidate:
        coords = cand.coords.copy()
        np.clip(coords[:, 0], 0.0, self.width - 1, out=coords[:, 0])
        np.clip(coords[:, 1], 0.0, self.height - 1, out=coords[:, 1])
        values = None if cand.values is None else np.clip(cand.values, *self.value_range)
        return KeyCandidate(coords, values)


@dataclass(frozen=True)
class LogoBounds:
    """Legal anchors keep the logo inside the host image."""

    max_anchor_x: int
    max_anchor_y: int
    blend_range: tuple = (0.0, 1.0)

    @classmethod
    def for_logo(cls, bitmap_shape, image_shape, blend_range=(0.0, 1.0)) -> "LogoBounds":
        return cls(image_shape[1] - bitmap_shape[1], image_shape[0] - bitmap_shape[0], tuple(blend_range))

    @property
    def lower(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.blend_range[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([float(self.max_anchor_x), float(self.max_anchor_y), self.blend_range[1]])

    def clamp(self, cand) -> np.ndarray:
        return np.clip(np.asarray(cand, dtype=np.float64), self.lower, self.upper)


@dataclass
class EvolutionTrace:
    best_fitness: list = field(default_factory=list)
    mean_fitness: list = field(default_factory=list)
    best_candidates: list = field(default_factory=list)

    def record(self, fitness: np.ndarray, population: Sequence) -> None:
        i = int(np.argmax(fitness))
        self.best_fitness.append(float(fitness[i]))
        self.mean_fitness.append(float(np.mean(fitness)))
        self.best_candidates.append(population[i])

    def generations_to_reach(self, threshold: float) -> Optional[int]:
        for g, f in enumerate(self.best_fitness):
            if f >= threshold:
                return g
        return None

    def to_csv(self) -> str:
        lines = ["generation,best_fitness,mean_fitness"]
        for g, (b, m) in enumerate(zip(self.best_fitness, self.mean_fitness)):
            lines.append(f"{g},{b!r},{m!r}")
        return "\n".join(lines) + "\n"


# -- the generational loop --------------------------------------------------


def draw_donors(rng: np.random.Generator, n: int, target: int) -> tuple[int, int, int]:
    """Three mutually distinct indices, none equal to ``target``."""
    others = rng.choice(n - 1, size=3, replace=False)
    others = others + (others >= target)
    return int(others[0]), int(others[1]), int(others[2])


def vector_evolve(bounds=None) -> Callable:
    """Plain ``p0 + F * (p1 - p2)`` on array candidates, clamped to ``bounds``."""

    def evolve(p0, p1, p2, F, rng):
        out = np.asarray(p0, dtype=np.float64) + F * (np.asarray(p1, dtype=np.float64) - np.asarray(p2, dtype=np.float64))
        if bounds is not None:
            out = np.clip(out, bounds[0], bounds[1])
        return out

    return evolve


def run_de(
    fitness: Callable[[Any], float],
    init: Callable[[np.random.Generator], Any],
    params: DEParams,
    evolve: Optional[Callable] = None,
) -> tuple[Any, EvolutionTrace]:
    """Maximize ``fitness`` by differential evolution.

    ``init(rng)`` samples one candidate. ``evolve(p0, p1, p2, F, rng)`` builds a
    trial from three donors; the default is plain vector arithmetic clamped
    to ``params.bounds``. Trials of one generation are built from the
    population as it stood at the start of that generation, evaluated
    (optionally on ``params.workers`` threads), and then applied in index
    order, so results do not depend on evaluation order.

    Returns the fittest candidate and the per-generation trace; entry 0 of the
    trace is the initial population.
    """
    params.validate()
    if evolve is None:
        evolve = vector_evolve(params.bounds)
    rng = np.random.default_rng(params.rng_seed)
    n, F = params.population_size, params.differential_weight

    population = [init(rng) for _ in range(n)]
    pool = ThreadPoolExecutor(params.workers) if params.workers > 1 else None
    evaluate = (lambda cands: list(pool.map(fitness, cands))) if pool else (lambda cands: [fitness(c) for c in cands])
    try:
        scores = np.array(evaluate(population), dtype=np.float64)
        trace = EvolutionTrace()
        trace.record(scores, population)
        for _ in range(params.generations):
            trials = []
            for i in range(n):
                j, k, l = draw_donors(rng, n, i)
                trials.append(evolve(population[j], population[k], population[l], F, rng))
            trial_scores = evaluate(trials)
            for i, (trial, s) in enumerate(zip(trials, trial_scores)):
                if s > scores[i]:
                    population[i] = trial
                    scores[i] = s
            trace.record(scores, population)
    finally:
        if pool is not None:
            pool.shutdown()
    return population[int(np.argmax(scores))], trace


# -- evolve operators -------------------------------------------------------


def evolve_logo(p0, p1, p2, F: float, bounds: Optional[LogoBounds] = None) -> np.ndarray:
    """``(anchor_x, anchor_y, blend_or_value)`` triplets: ``p0 + F * (p1 - p2)``, projected."""
    out = np.asarray(p0, dtype=np.float64) + F * (np.asarray(p1, dtype=np.float64) - np.asarray(p2, dtype=np.float64))
    return out if bounds is None else bounds.clamp(out)


def pair_closest(set_a, set_b) -> list[tuple[int, int]]:
    """Greedy minimum-distance perfect matching between two K-point sets.

    All K^2 Euclidean distances go into a min-heap keyed by ``(distance, i, j)``;
    popping in order and pairing any two still-free points yields the matching
    in O(K^2 log K). Returned sorted by index into ``set_a``.
    """
    a = np.asarray(set_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(set_b, dtype=np.float64).reshape(-1, 2)
    if len(a) != len(b):
        raise PatternError(f"cannot pair {len(a)} points with {len(b)}")
    k = len(a)
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    heap = [(dist[i, j], i, j) for i in range(k) for j in range(k)]
    heapq.heapify(heap)
    free_a, free_b = [True] * k, [True] * k
    pairs = []
    while heap and len(pairs) < k:
        _, i, j = heapq.heappop(heap)
        if free_a[i] and free_b[j]:
            free_a[i] = free_b[j] = False
            pairs.append((i, j))
    pairs.sort()
    return pairs


def _partner_index(pairs) -> np.ndarray:
    out = np.empty(len(pairs), dtype=np.int64)
    for i, j in pairs:
        out[i] = j
    return out


def _apply_key_difference(p1: KeyCandidate, p2: KeyCandidate, p3: KeyCandidate, to2, to3, F, bounds):
    coords = p1.coords + F * (p2.coords[to2] - p3.coords[to3])
    values = None
    if p1.values is not None:
        if p2.values is None or p3.values is None:
            raise PatternError("either all or none of the candidates carry values")
        values = p1.values + F * (p2.values[to2] - p3.values[to3])
    out = KeyCandidate(coords, values)
    return out if bounds is None else bounds.clamp(out)


def _check_sizes(*cands: KeyCandidate) -> None:
    if len({len(c) for c in cands}) != 1:
        raise PatternError(f"candidate sizes differ: {[len(c) for c in cands]}")


def evolve_key_closest(p1: KeyCandidate, p2: KeyCandidate, p3: KeyCandidate, F: float,
                       bounds: Optional[KeyBounds] = None) -> KeyCandidate:
    """Each pixel of ``p1`` moves by ``F`` times the difference of its closest partners in ``p2`` and ``p3``."""
    _check_sizes(p1, p2, p3)
    to2 = _partner_index(pair_closest(p1.coords, p2.coords))
    to3 = _partner_index(pair_closest(p1.coords, p3.coords))
    return _apply_key_difference(p1, p2, p3, to2, to3, F, bounds)


def evolve_key_random(p1: KeyCandidate, p2: KeyCandidate, p3: KeyCandidate, F: float,
                      bounds: Optional[KeyBounds], rng: np.random.Generator) -> KeyCandidate:
    """Baseline: same arithmetic with uniformly random pairings."""
    _check_sizes(p1, p2, p3)
    k = len(p1)
    to2 = rng.permutation(k)
    to3 = rng.permutation(k)
    return _apply_key_difference(p1, p2, p3, to2, to3, F, bounds)


def key_evolver(mode: str, bounds: Optional[KeyBounds]) -> Callable:
    if mode == "closest":
        return lambda p1, p2, p3, F, rng: evolve_key_closest(p1, p2, p3, F, bounds)
    if mode == "random":
        return lambda p1, p2, p3, F, rng: evolve_key_random(p1, p2, p3, F, bounds, rng)
    raise ConfigError(f"unknown pairing mode {mode!r}")


def logo_evolver(bounds: Optional[LogoBounds]) -> Callable:
    return lambda p0, p1, p2, F, rng: evolve_logo(p0, p1, p2, F, bounds)


def key_initializer(k: int, bounds: KeyBounds, init_values: Optional[float] = None) -> Callable:
    """Uniform coordinates over the image; values start at ``init_values`` when given."""

    def init(rng):
        coords = np.column_stack([
            rng.uniform(0.0, bounds.width - 1, size=k),
            rng.uniform(0.0, bounds.height - 1, size=k),
        ])
        values = None if init_values is None else np.full(k, float(init_values))
        return KeyCandidate(coords, values)

    return init


def logo_initializer(bounds: LogoBounds) -> Callable:
    def init(rng):
        return rng.uniform(bounds.lower, bounds.upper)

    return init


# -- candidate -> pattern ---------------------------------------------------


def key_pattern_for(candidate: KeyCandidate, image_shape, message: Optional[Message] = None) -> KeyPattern:
    """Turn a key candidate into the concrete pattern the fitness sees.

    With a message, colliding pixels are spread to free neighbours and the
    message is laid out in raster order. Without one, the candidate's own
    values are used and collisions stack.
    """
    if message is not None:
        xs, ys = rasterize_coords(candidate.coords, image_shape)
        xs, ys = spread_collisions(xs, ys, image_shape)
        return encode_message(message, np.column_stack([xs, ys]), image_shape)
    if candidate.values is None:
        raise PatternError("candidate has no values and no message was given")
    return rasterize_key(candidate.coords, image_shape, candidate.values)


def logo_pattern_for(candidate, bitmap, blend_mode: str = "alpha", fixed: float = PIXEL_MAX,
                     support_threshold: float = 0.0) -> LogoPattern:
    """``blend_mode='alpha'``: third component is alpha, value_scale fixed.
    ``blend_mode='value'``: third component is value_scale, alpha fixed."""
    ax, ay, third = (float(c) for c in candidate)
    ax, ay = int(math.floor(ax + 0.5)), int(math.floor(ay + 0.5))
    if blend_mode == "alpha":
        return LogoPattern(bitmap, ax, ay, alpha=third, value_scale=fixed, support_threshold=support_threshold)
    if blend_mode == "value":
        return LogoPattern(bitmap, ax, ay, alpha=fixed, value_scale=third, support_threshold=support_threshold)
    raise ConfigError(f"blend_mode must be 'alpha' or 'value', got {blend_mode!r}")


# -- fitness ----------------------------------------------------------------


def sample_fitness_subset(data: LabeledDataset, size: int, seed: int) -> LabeledDataset:
    """Drawn once per run so fitness is a deterministic function of the candidate."""
    rng = np.random.default_rng(seed)
    size = min(size, len(data))
    return data.subset(np.sort(rng.choice(len(data), size=size, replace=False)))


def fitness_location(candidate, oracle, subset: LabeledDataset, embed: Callable) -> float:
    """Fraction of ``subset`` that the clean oracle still labels correctly after embedding.

    ``embed(images, candidate)`` returns the embedded batch.
    """
    if len(subset) == 0:
        raise PatternError("fitness subset is empty")
    predicted, _ = oracle.predict_batch(embed(subset.images, candidate))
    return float(np.mean(np.asarray(predicted) == subset.labels))


def fitness_location_value(candidate, oracle, subset: LabeledDataset, embed: Callable,
                           params: FitnessParams, values: Optional[Sequence[float]] = None) -> float:
    """Location fitness plus a weighted sum of pattern values, normalized so the best score is 1.

    ``values`` defaults to the candidate's own value parameters. The
    normalization divides by ``1 + weight * K * value_max``, a positive
    constant, so the ranking of candidates matches the unnormalized sum.
    """
    if values is None:
        values = getattr(candidate, "values", None)
    if values is None:
        raise PatternError("candidate carries no value parameters")
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    accuracy = fitness_location(candidate, oracle, subset, embed)
    weight = params.weight_for(len(values))
    return (accuracy + weight * float(values.sum())) / (1.0 + weight * len(values) * params.value_max)


def key_embedder(image_shape, message: Optional[Message] = None) -> Callable:
    def embed(images, candidate):
        return key_embed(images, key_pattern_for(candidate, image_shape, message))

    return embed


def logo_embedder(bitmap, blend_mode: str = "alpha", fixed: float = PIXEL_MAX,
                  support_threshold: float = 0.0) -> Callable:
    def embed(images, candidate):
        return logo_embed(images, logo_pattern_for(candidate, bitmap, blend_mode, fixed, support_threshold))

    return embed


def coverage_fitness(targets, sigma: float = 1.0) -> Callable[[KeyCandidate], float]:
    """Synthetic pixel-placement task with a known optimum of 1.

    Every target location wants some pixel on top of it; a target's score is
    ``exp(-d^2 / (2 sigma^2))`` for its nearest pixel, and fitness is the mean
    over targets. It is invariant to pixel order, like the real objective.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)

    def fitness(candidate: KeyCandidate) -> float:
        c = candidate.coords
        d2 = ((targets[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        return float(np.mean(np.exp(-d2.min(axis=1) / (2.0 * sigma ** 2))))

    return fitness
