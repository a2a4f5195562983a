"""End-to-end agent loop: seed episodes, then alternating training and planning episodes."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from latent_rhe.errors import DomainError, ShapeError, UsageError
from latent_rhe.gridworld import (
    GLOBAL_SIZE,
    NUM_ACTIONS,
    GridLayout,
    TaskVariant,
    default_layout,
    load_map,
    reset,
    step,
)
from latent_rhe.planner import PlannerConfig, plan
from latent_rhe.replay import EpisodeRecord, ReplayBuffer, dump_episode
from latent_rhe.rssm import RSSM, LossBreakdown, Trainer, TrainConfig, config_for, train_epoch

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "seed",
    "episode",
    "return",
    "steps",
    "recon_nll",
    "reward_nll",
    "kl_raw",
    "kl_reg",
    "total_loss",
    "wallclock_s",
]
LOSS_HEADER = ["epoch", "reconstruction_nll", "reward_nll", "kl_raw", "kl_regularized", "total"]
PLANNER_HEADER = ["episode", "step", "action", "best_fitness", "seed_fitness", "diversity"]

# stream ids for per-component generators derived from the master seed
ENV, MODEL, PLANNER, TRAIN, FILTER, POLICY, NOISE = range(7)


def component_rng(master: int, component: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([master, component, *extra])


def component_seed(master: int, component: int, *extra: int) -> int:
    return int(np.random.SeedSequence([master, component, *extra]).generate_state(1)[0])


@dataclass
class RunConfig:
    variant: TaskVariant = field(default_factory=TaskVariant)
    layout_path: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    episodes: int = 500
    seed_episodes: int = 5
    epochs_per_phase: int = 100
    profile: str = "full"
    planner: PlannerConfig | None = None
    out_dir: str = "runs"
    buffer_capacity: int = 1_000_000
    batch_size: int = 50
    seq_len: int = 20
    batches_per_epoch: int = 1
    save_checkpoint: bool = True
    dump_episodes: bool = False

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        if not (self.episodes >= self.seed_episodes >= 1):
            raise UsageError(f"need episodes >= seed_episodes >= 1, got {self.episodes}, {self.seed_episodes}")
        if self.profile not in ("full", "desk"):
            raise UsageError(f"profile must be 'full' or 'desk', got {self.profile!r}")
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if self.epochs_per_phase < 0:
            raise UsageError("epochs_per_phase must be >= 0")

    def planner_config(self) -> PlannerConfig:
        return self.planner if self.planner is not None else default_planner(self.profile)

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, seq_len=self.seq_len, batches_per_epoch=self.batches_per_epoch)

    def layout(self) -> GridLayout:
        return load_map(self.layout_path) if self.layout_path else default_layout()

    @property
    def global_size(self) -> int:
        return 32 if self.profile == "desk" else GLOBAL_SIZE


def default_planner(profile: str) -> PlannerConfig:
    if profile == "desk":
        return PlannerConfig(candidates=100)
    return PlannerConfig()


# -- config file --------------------------------------------------------------

_PLANNER_KEYS = {
    "horizon": int,
    "candidates": int,
    "generations": int,
    "mutation_rate": float,
    "shift_buffer": lambda v: v.lower() in ("1", "true", "yes", "on"),
    "samples": int,
    "workers": int,
}
_RUN_KEYS = {
    "variant": TaskVariant.from_name,
    "layout": str,
    "seeds": lambda v: tuple(int(s) for s in v.split(",") if s.strip()),
    "episodes": int,
    "seed_episodes": int,
    "epochs_per_phase": int,
    "profile": str,
    "out": str,
    "buffer_capacity": int,
    "batch_size": int,
    "seq_len": int,
    "batches_per_epoch": int,
    "save_checkpoint": _PLANNER_KEYS["shift_buffer"],
    "dump_episodes": _PLANNER_KEYS["shift_buffer"],
}
_RENAMED = {"layout": "layout_path", "out": "out_dir"}


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"line {lineno}: expected key=value, got {raw!r}")
        if key in _RUN_KEYS:
            values[key] = _RUN_KEYS[key](value)
        elif key in _PLANNER_KEYS:
            values[key] = _PLANNER_KEYS[key](value)
        else:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
    return values


def build_run_config(values: dict) -> RunConfig:
    """Turn parsed key/values (file merged with CLI overrides) into a RunConfig."""
    run_kwargs = {}
    planner_kwargs = {}
    for key, value in values.items():
        if value is None:
            continue
        if key in _PLANNER_KEYS:
            planner_kwargs[key] = value
        else:
            run_kwargs[_RENAMED.get(key, key)] = value
    cfg = RunConfig(**run_kwargs)
    if planner_kwargs:
        cfg = replace(cfg, planner=replace(default_planner(cfg.profile), **planner_kwargs))
    return cfg


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(values)


# -- episodes -----------------------------------------------------------------


def random_episode(variant: TaskVariant, layout: GridLayout, env_seed: int, rng: np.random.Generator, global_size: int = GLOBAL_SIZE) -> EpisodeRecord:
    state, obs = reset(variant, layout, env_seed, global_size=global_size)
    frames, actions, rewards, dones = [obs], [-1], [0.0], [False]
    while not state.terminal:
        action = int(rng.integers(NUM_ACTIONS))
        state, res = step(state, action)
        frames.append(res.observation)
        actions.append(action)
        rewards.append(res.reward)
        dones.append(res.done)
    return EpisodeRecord(np.stack(frames), actions, rewards, dones)


def planning_episode(
    model: RSSM,
    planner: PlannerConfig,
    variant: TaskVariant,
    layout: GridLayout,
    env_seed: int,
    *,
    plan_rng: np.random.Generator,
    filter_rng: np.random.Generator,
    noise_seed: int,
    global_size: int = GLOBAL_SIZE,
    on_step: Callable[[int, int, dict], None] | None = None,
) -> EpisodeRecord:
    """Act for one episode: filter each frame into a latent, plan, execute the first action."""
    state, obs = reset(variant, layout, env_seed, global_size=global_size)
    frames, actions, rewards, dones = [obs], [-1], [0.0], [False]
    latent = None
    prev_action = -1
    previous = None
    t = 0
    while not state.terminal:
        latent = model.observe_step(latent, prev_action, obs, noise=filter_rng.standard_normal(model.noise_dim))
        stats: dict = {}
        action, previous = plan(latent, previous, model, planner, plan_rng, noise_seed=noise_seed, plan_step=t, stats=stats)
        if on_step is not None:
            on_step(t, action, stats)
        state, res = step(state, action)
        obs = res.observation
        frames.append(obs)
        actions.append(action)
        rewards.append(res.reward)
        dones.append(res.done)
        prev_action = action
        t += 1
    return EpisodeRecord(np.stack(frames), actions, rewards, dones)


def random_baseline(
    variant: TaskVariant, layout: GridLayout, episodes: int, seed: int, global_size: int = 16
) -> list[float]:
    """Returns of a uniform-random policy (renders at low resolution; pixels are unused)."""
    rng = component_rng(seed, POLICY)
    return [
        random_episode(variant, layout, component_seed(seed, ENV, i), rng, global_size).total_reward
        for i in range(episodes)
    ]


# -- run ----------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    if x is None:
        return "nan"
    return repr(float(x))


class _SeedRun:
    """Mutable state of one seed's run: model, optimizer, buffer and RNG streams."""

    def __init__(self, config: RunConfig, seed: int, clock: Callable[[], float]):
        self.config, self.seed, self.clock = config, seed, clock
        self.out = Path(config.out_dir)
        self.variant, self.layout = config.variant, config.layout()
        self.planner = config.planner_config()
        self.model = RSSM(config_for(self.variant, config.profile), seed=component_seed(seed, MODEL))
        self.trainer = Trainer(self.model, config.train_config(), rng=component_rng(seed, TRAIN))
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.policy_rng = component_rng(seed, POLICY)
        self.plan_rng = component_rng(seed, PLANNER)
        self.filter_rng = component_rng(seed, FILTER)
        self.noise_seed = component_seed(seed, NOISE)
        self.epoch = 0

    def learn(self, losses) -> LossBreakdown | None:
        phase = []
        for _ in range(self.config.epochs_per_phase):
            part = train_epoch(self.buffer, self.trainer)
            self.epoch += 1
            losses.writerow([self.epoch, *(_fmt(getattr(part, f.name)) for f in fields(part))])
            phase.append(part)
        return LossBreakdown.mean_of(phase) if phase else None

    def episode(self, ep: int, metrics, losses, planlog) -> None:
        cfg = self.config
        t0 = self.clock()
        env_seed = component_seed(self.seed, ENV, ep)
        loss = None
        if ep < cfg.seed_episodes:
            record = random_episode(self.variant, self.layout, env_seed, self.policy_rng, cfg.global_size)
        else:
            loss = self.learn(losses)

            def log_step(t, action, stats):
                planlog.writerow(
                    [ep, t, action, _fmt(stats["best_fitness"]), _fmt(stats["seed_fitness"]), _fmt(stats["diversity"])]
                )

            record = planning_episode(
                self.model,
                self.planner,
                self.variant,
                self.layout,
                env_seed,
                plan_rng=self.plan_rng,
                filter_rng=self.filter_rng,
                noise_seed=component_seed(self.noise_seed, ep),
                global_size=cfg.global_size,
                on_step=log_step,
            )
        self.buffer.push(record)
        if cfg.dump_episodes:
            ep_dir = self.out / f"episodes_seed{self.seed}"
            ep_dir.mkdir(exist_ok=True)
            dump_episode(record, ep_dir / f"episode{ep:04d}")
        steps = len(record) - 1
        row = [self.seed, ep, _fmt(record.total_reward), steps]
        row += [_fmt(None if loss is None else getattr(loss, f.name)) for f in fields(LossBreakdown)]
        row.append(f"{self.clock() - t0:.3f}")
        metrics.writerow(row)
        log.info("seed %d episode %d return %+g steps %d", self.seed, ep, record.total_reward, steps)


def run_seed(config: RunConfig, seed: int, clock: Callable[[], float] = time.perf_counter) -> Path:
    """Run one seed; returns the metrics CSV path."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = _SeedRun(config, seed, clock)
    metrics_path = out / f"metrics_seed{seed}.csv"
    with open(metrics_path, "w", newline="") as mf, open(out / f"losses_seed{seed}.csv", "w", newline="") as lf, open(
        out / f"planner_seed{seed}.csv", "w", newline=""
    ) as pf:
        metrics, losses, planlog = csv.writer(mf), csv.writer(lf), csv.writer(pf)
        metrics.writerow(METRICS_HEADER)
        losses.writerow(LOSS_HEADER)
        planlog.writerow(PLANNER_HEADER)
        for ep in range(config.episodes):
            try:
                state.episode(ep, metrics, losses, planlog)
            except (UsageError, ShapeError, DomainError) as exc:
                raise type(exc)(f"seed {seed}, episode {ep}: {exc}") from exc
            for fh in (mf, lf, pf):
                fh.flush()
    if config.save_checkpoint:
        state.model.save(out / f"model_seed{seed}.ckpt")
    return metrics_path


def run(config: RunConfig, clock: Callable[[], float] = time.perf_counter) -> list[Path]:
    return [run_seed(config, seed, clock) for seed in config.seeds]


# -- reconstructions ----------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM from a channel-major ``(3, H, W)`` image in ``[0, 1]``."""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise UsageError(f"{path} is not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float32) / 255.0


def reconstruct(model: RSSM, episode: EpisodeRecord, noise: np.ndarray | None = None) -> np.ndarray:
    """Decoded frames ``(T, C, H, W)`` from the filtered latents of an episode, clipped to [0, 1]."""
    from latent_rhe.diffcore import no_grad

    with no_grad():
        post = model.filter(episode.observations[None], episode.actions[None], noise=noise)
        t = len(episode)
        recon = model.decode_observation(
            post.h.reshape((t, model.config.deter_size)), post.s.reshape((t, model.config.stoch_size))
        )
    return np.clip(recon.data, 0.0, 1.0)


def dump_reconstructions(model: RSSM, episode: EpisodeRecord, outdir: str | Path) -> list[Path]:
    """Write ``actual_tttt.ppm`` / ``recon_tttt.ppm`` pairs for every step of the episode."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    recon = reconstruct(model, episode)
    paths = []
    for t in range(len(episode)):
        for name, img in (("actual", episode.observations[t]), ("recon", recon[t])):
            path = outdir / f"{name}_{t:04d}.ppm"
            write_ppm(path, img)
            paths.append(path)
    return paths


# -- summaries ----------------------------------------------------------------


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(paths: Iterable[str | Path], out_file: str | Path) -> Path:
    """Per-episode mean and population standard deviation of return and steps across seeds."""
    tables = [read_metrics(p) for p in paths]
    if not tables:
        raise UsageError("summarize needs at least one metrics file")
    lengths = {len(t) for t in tables}
    if len(lengths) != 1:
        raise UsageError(f"metrics files have different episode counts: {sorted(lengths)}")
    for t in tables:
        if [int(r["episode"]) for r in t] != [int(r["episode"]) for r in tables[0]]:
            raise UsageError("metrics files are not aligned by episode index")
    returns = np.array([[float(r["return"]) for r in t] for t in tables])
    steps = np.array([[float(r["steps"]) for r in t] for t in tables])
    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    with open(out_file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "return_mean", "return_std", "steps_mean", "steps_std", "seeds"])
        for i, row in enumerate(tables[0]):
            writer.writerow(
                [
                    row["episode"],
                    repr(float(returns[:, i].mean())),
                    repr(float(returns[:, i].std())),
                    repr(float(steps[:, i].mean())),
                    repr(float(steps[:, i].std())),
                    len(tables),
                ]
            )
    return out_file


def final_mean_return(path: str | Path, last: int) -> float:
    rows = read_metrics(path)
    vals = [float(r["return"]) for r in rows[-last:]]
    return float(np.mean(vals)) if vals else math.nan
