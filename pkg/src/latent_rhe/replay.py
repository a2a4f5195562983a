"""Episode storage and fixed-length segment sampling."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from latent_rhe.errors import UsageError

MAX_EPISODE_STEPS = 501  # initial frame plus at most 500 transitions


@dataclass
class EpisodeRecord:
    """Time-aligned episode: ``observations[t]`` is reached by ``actions[t]`` (``-1`` at
    ``t = 0``) and pays ``rewards[t]``."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __post_init__(self) -> None:
        self.observations = np.asarray(self.observations)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.validate()

    def __len__(self) -> int:
        return len(self.observations)

    def validate(self) -> None:
        n = len(self.observations)
        if n == 0:
            raise UsageError("episode has no steps")
        if not (len(self.actions) == len(self.rewards) == len(self.dones) == n):
            raise UsageError(
                f"episode arrays misaligned: {n} observations, {len(self.actions)} actions, "
                f"{len(self.rewards)} rewards, {len(self.dones)} done flags"
            )
        if n > MAX_EPISODE_STEPS:
            raise UsageError(f"episode has {n} steps, limit is {MAX_EPISODE_STEPS}")
        if self.dones[:-1].any():
            raise UsageError("only the final step may be marked done")

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass
class SegmentBatch:
    observations: np.ndarray  # (B, L, C, H, W)
    actions: np.ndarray  # (B, L) previous actions, -1 = none
    rewards: np.ndarray  # (B, L)
    dones: np.ndarray  # (B, L)
    episode_ids: np.ndarray  # (B, L) id of the source episode for every step
    starts: np.ndarray  # (B,)


class ReplayBuffer:
    """Ring of episodes bounded by total stored steps; oldest episodes are evicted first."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise UsageError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self._episodes: deque[tuple[int, EpisodeRecord]] = deque()
        self._next_id = 0
        self.total_steps = 0

    def __len__(self) -> int:
        return self.total_steps

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    def episodes(self) -> list[EpisodeRecord]:
        return [ep for _, ep in self._episodes]

    def episode_ids(self) -> list[int]:
        return [i for i, _ in self._episodes]

    def push(self, episode: EpisodeRecord) -> int:
        """Store an episode and return its id."""
        if not isinstance(episode, EpisodeRecord):
            raise UsageError(f"expected an EpisodeRecord, got {type(episode).__name__}")
        episode.validate()
        if len(episode) > self.capacity:
            raise UsageError(f"episode of {len(episode)} steps exceeds buffer capacity {self.capacity}")
        ep_id = self._next_id
        self._next_id += 1
        self._episodes.append((ep_id, episode))
        self.total_steps += len(episode)
        while self.total_steps > self.capacity:
            _, old = self._episodes.popleft()
            self.total_steps -= len(old)
        return ep_id

    def sample_batch(self, batch_size: int, seq_len: int, rng: np.random.Generator) -> SegmentBatch:
        """``batch_size`` segments of ``seq_len`` contiguous steps, each within one episode.

        Episodes are drawn uniformly among those at least ``seq_len`` long, then
        the start index uniformly over valid positions.
        """
        eligible = [(i, ep) for i, ep in self._episodes if len(ep) >= seq_len]
        if not eligible:
            raise UsageError(f"no stored episode has at least {seq_len} steps")
        picks = rng.integers(len(eligible), size=batch_size)
        obs, acts, rews, dones, ids, starts = [], [], [], [], [], []
        for k in picks:
            ep_id, ep = eligible[int(k)]
            start = int(rng.integers(len(ep) - seq_len + 1))
            window = slice(start, start + seq_len)
            obs.append(ep.observations[window])
            acts.append(ep.actions[window])
            rews.append(ep.rewards[window])
            dones.append(ep.dones[window])
            ids.append(np.full(seq_len, ep_id))
            starts.append(start)
        return SegmentBatch(
            observations=np.stack(obs),
            actions=np.stack(acts),
            rewards=np.stack(rews),
            dones=np.stack(dones),
            episode_ids=np.stack(ids),
            starts=np.asarray(starts),
        )


def dump_episode(episode: EpisodeRecord, path_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.npy`` (pixel stream) and ``<stem>.csv`` (step, action, reward, done)."""
    stem = Path(path_stem)
    pixels = stem.with_suffix(".npy")
    sidecar = stem.with_suffix(".csv")
    np.save(pixels, np.asarray(episode.observations, dtype=np.float32))
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "action", "reward", "done"])
        for t in range(len(episode)):
            writer.writerow([t, int(episode.actions[t]), f"{float(episode.rewards[t]):g}", int(episode.dones[t])])
    return pixels, sidecar


def load_episode(path: str | Path) -> EpisodeRecord:
    """Read an episode written by ``dump_episode``; ``path`` may name either file or the stem."""
    stem = Path(path)
    if stem.suffix in (".npy", ".csv"):
        stem = stem.with_suffix("")
    pixels = np.load(stem.with_suffix(".npy"))
    with open(stem.with_suffix(".csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return EpisodeRecord(
        observations=pixels,
        actions=[int(r["action"]) for r in rows],
        rewards=[float(r["reward"]) for r in rows],
        dones=[r["done"] == "1" for r in rows],
    )
