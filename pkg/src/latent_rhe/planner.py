"""Rolling-horizon evolution with a (1+lambda) random-mutation hill climber.

Any object with ``noise_dim`` and ``rollout_rewards(start, actions, noise)``
can serve as the forward model: ``actions`` is ``(N, H)``, ``noise`` is
``(N, M, H, noise_dim)`` and the result is ``(N, M, H)`` predicted rewards.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from latent_rhe.errors import UsageError
from latent_rhe.gridworld import NUM_ACTIONS


class ForwardModel(Protocol):
    noise_dim: int

    def rollout_rewards(self, start: Any, actions: np.ndarray, noise: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 20
    candidates: int = 300
    generations: int = 1
    mutation_rate: float = 0.5
    shift_buffer: bool = True
    samples: int = 1
    workers: int = 1
    chunk_size: int = 100

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.candidates < 1 or self.generations < 1 or self.samples < 1:
            raise UsageError(f"horizon, candidates, generations and samples must be >= 1: {self}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise UsageError(f"mutation_rate must lie in [0, 1], got {self.mutation_rate}")
        if self.workers < 1 or self.chunk_size < 1:
            raise UsageError("workers and chunk_size must be >= 1")


def sample_uniform_sequence(horizon: int, rng: np.random.Generator, num_actions: int = NUM_ACTIONS) -> np.ndarray:
    if horizon < 1:
        raise UsageError(f"horizon must be >= 1, got {horizon}")
    return rng.integers(num_actions, size=horizon)


def mutate(seq: np.ndarray, rate: float, rng: np.random.Generator, num_actions: int = NUM_ACTIONS) -> np.ndarray:
    """Resample each gene uniformly with probability ``rate``."""
    return mutate_many(seq, 1, rate, rng, num_actions)[0]


def mutate_many(
    seq: np.ndarray, count: int, rate: float, rng: np.random.Generator, num_actions: int = NUM_ACTIONS
) -> np.ndarray:
    if not 0.0 <= rate <= 1.0:
        raise UsageError(f"mutation rate must lie in [0, 1], got {rate}")
    seq = np.asarray(seq)
    mask = rng.random((count, seq.size)) < rate
    fresh = rng.integers(num_actions, size=(count, seq.size))
    return np.where(mask, fresh, seq[None, :])


def shift_buffer(seq: np.ndarray, rng: np.random.Generator, num_actions: int = NUM_ACTIONS) -> np.ndarray:
    """Drop the first gene, shift left and append a uniformly random one."""
    seq = np.asarray(seq)
    return np.concatenate([seq[1:], rng.integers(num_actions, size=1)])


def candidate_noise(noise_seed: int, plan_step: int, index: int, samples: int, horizon: int, dim: int) -> np.ndarray:
    """Noise owned by one candidate, keyed so evaluation order cannot change it."""
    rng = np.random.default_rng([noise_seed, plan_step, index])
    return rng.standard_normal((samples, horizon, dim))


def _evaluate_chunk(model, start, candidates, lo, samples, noise_seed, plan_step) -> np.ndarray:
    n, horizon = candidates.shape
    noise = np.stack(
        [candidate_noise(noise_seed, plan_step, lo + i, samples, horizon, model.noise_dim) for i in range(n)]
    )
    rewards = np.asarray(model.rollout_rewards(start, candidates, noise), dtype=np.float64)
    return rewards.sum(axis=2).mean(axis=1)


def evaluate(
    candidates: np.ndarray,
    start,
    model: ForwardModel,
    *,
    samples: int = 1,
    noise_seed: int = 0,
    plan_step: int = 0,
    workers: int = 1,
    chunk_size: int = 100,
) -> np.ndarray:
    """Fitness per candidate: mean over ``samples`` rollouts of the summed predicted rewards.

    Candidates are split into fixed chunks; with ``workers > 1`` the chunks run
    on a thread pool.  Results do not depend on ``workers``.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.int64))
    n = len(candidates)
    bounds = [(lo, min(lo + chunk_size, n)) for lo in range(0, n, chunk_size)]

    def run(b: tuple[int, int]) -> np.ndarray:
        lo, hi = b
        return _evaluate_chunk(model, start, candidates[lo:hi], lo, samples, noise_seed, plan_step)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    return np.concatenate(parts)


def plan(
    start,
    previous: np.ndarray | None,
    model: ForwardModel,
    config: PlannerConfig,
    rng: np.random.Generator,
    *,
    noise_seed: int = 0,
    plan_step: int = 0,
    stats: dict | None = None,
) -> tuple[int, np.ndarray]:
    """Pick the next action.  Returns ``(first action, best sequence)``.

    Each generation evaluates the incumbent at index 0 followed by ``N - 1``
    mutants of it; the first maximum wins, so ties keep the incumbent.
    Candidate noise is keyed by ``(noise_seed, plan_step, index)``.
    """
    h = config.horizon
    if previous is not None and config.shift_buffer:
        if len(previous) != h:
            raise UsageError(f"previous plan has length {len(previous)}, horizon is {h}")
        best = shift_buffer(previous, rng)
    else:
        best = sample_uniform_sequence(h, rng)
    best_fitness = -np.inf
    seed_fitness = None
    population = best[None, :]
    for _ in range(config.generations):
        population = np.concatenate([best[None, :], mutate_many(best, config.candidates - 1, config.mutation_rate, rng)])
        fitness = evaluate(
            population,
            start,
            model,
            samples=config.samples,
            noise_seed=noise_seed,
            plan_step=plan_step,
            workers=config.workers,
            chunk_size=config.chunk_size,
        )
        if seed_fitness is None:
            seed_fitness = float(fitness[0])
        else:
            fitness[0] = best_fitness  # incumbent keeps the fitness it won with
        winner = int(np.argmax(fitness))
        best, best_fitness = population[winner].copy(), float(fitness[winner])
    if stats is not None:
        stats["best_fitness"] = best_fitness
        stats["seed_fitness"] = seed_fitness
        stats["diversity"] = float(np.mean(population != best[None, :]))
    return int(best[0]), best
