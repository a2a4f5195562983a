"""Recurrent state space model: conv encoder, GRU transition, Gaussian prior and
posterior over the stochastic state, deconv observation decoder and reward head.

Time alignment follows the replay convention: step ``t`` of a sequence holds
the observation ``o_t``, the action ``a_{t-1}`` that led to it (``-1`` when
there is none) and the reward ``r_t`` received on arrival.  The latent at
step ``t`` is ``h_t = f(h_{t-1}, s_{t-1}, a_{t-1})`` starting from
``h = 0, s = 0``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING

import numpy as np

from latent_rhe.diffcore import (
    AdamState,
    Value,
    adam_step,
    clip_grad_norm,
    concat,
    conv2d_cm,
    conv_output_size,
    deconv2d_cm,
    deconv_output_size,
    dense,
    gated_recurrent_cell,
    gaussian_kl,
    gaussian_sample,
    load_checkpoint,
    maximum,
    no_grad,
    one_hot,
    relu,
    save_checkpoint,
    softplus,
    square,
    stack,
    transpose,
)
from latent_rhe.errors import ShapeError, UsageError
from latent_rhe.gridworld import NUM_ACTIONS, TaskVariant

if TYPE_CHECKING:
    from latent_rhe.replay import ReplayBuffer, SegmentBatch


@dataclass(frozen=True)
class RSSMConfig:
    obs_shape: tuple[int, int, int] = (3, 64, 64)
    enc_channels: tuple[int, ...] = (32, 64, 128, 256)
    enc_kernels: tuple[int, ...] = (4, 4, 4, 4)
    embed_size: int = 200
    deter_size: int = 200
    stoch_size: int = 32
    hidden_size: int = 200
    dec_embed_size: int = 256
    dec_channels: tuple[int, ...] = (128, 64, 32, 3)
    dec_kernels: tuple[int, ...] = (5, 5, 6, 6)
    stride: int = 2
    num_actions: int = NUM_ACTIONS
    min_std: float = 0.1
    dtype: str = "float32"

    def __post_init__(self) -> None:
        for name in ("obs_shape", "enc_channels", "enc_kernels", "dec_channels", "dec_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.enc_channels) != len(self.enc_kernels) or len(self.dec_channels) != len(self.dec_kernels):
            raise UsageError("channel and kernel lists must have equal length")
        enc = self.encoder_sizes()
        if enc[-1] < 1:
            raise ShapeError(f"encoder chain {enc} collapses below one pixel")
        dec = self.decoder_sizes()
        if dec[-1] != self.obs_shape[1] or self.obs_shape[1] != self.obs_shape[2]:
            raise ShapeError(f"decoder chain {dec} does not end at observation size {self.obs_shape[1:]}")
        if self.dec_channels[-1] != self.obs_shape[0]:
            raise ShapeError(f"decoder emits {self.dec_channels[-1]} channels, observations have {self.obs_shape[0]}")

    def encoder_sizes(self) -> list[int]:
        sizes = [self.obs_shape[1]]
        for k in self.enc_kernels:
            sizes.append(conv_output_size(sizes[-1], k, self.stride))
        return sizes

    def decoder_sizes(self) -> list[int]:
        sizes = [1]
        for k in self.dec_kernels:
            sizes.append(deconv_output_size(sizes[-1], k, self.stride))
        return sizes

    @property
    def flat_features(self) -> int:
        return self.enc_channels[-1] * self.encoder_sizes()[-1] ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RSSMConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def config_for(variant: TaskVariant, profile: str = "full") -> RSSMConfig:
    """Architecture for a task variant.  ``full`` matches the published sizes;
    ``desk`` is a reduced model on 32x32 global frames for CPU-scale runs."""
    local = variant.local_view
    if profile == "full":
        if local:
            return RSSMConfig(obs_shape=(3, 28, 28), enc_kernels=(4, 4, 4, 1), dec_kernels=(2, 3, 5, 4))
        return RSSMConfig()
    if profile == "desk":
        common = dict(
            enc_channels=(8, 16, 32, 64),
            embed_size=64,
            deter_size=64,
            stoch_size=8,
            hidden_size=64,
            dec_embed_size=128,
            dec_channels=(32, 16, 8, 3),
        )
        if local:
            return RSSMConfig(obs_shape=(3, 28, 28), enc_kernels=(4, 4, 4, 1), dec_kernels=(2, 3, 5, 4), **common)
        return RSSMConfig(obs_shape=(3, 32, 32), enc_kernels=(4, 4, 4, 2), dec_kernels=(3, 3, 3, 4), **common)
    raise UsageError(f"unknown profile {profile!r}")


def miniature_config(dtype: str = "float64") -> RSSMConfig:
    """Tiny model on 8x8 frames used for finite-difference checks."""
    return RSSMConfig(
        obs_shape=(3, 8, 8),
        enc_channels=(3, 4, 4, 5),
        enc_kernels=(4, 2, 1, 1),
        embed_size=6,
        deter_size=4,
        stoch_size=2,
        hidden_size=5,
        dec_embed_size=4,
        dec_channels=(4, 3, 3, 3),
        dec_kernels=(1, 2, 2, 2),
        dtype=dtype,
    )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    seq_len: int = 20
    learning_rate: float = 6e-4
    epsilon: float = 1e-4
    grad_clip: float = 1000.0
    kl_weight: float = 0.1
    free_nats: float = 3.0
    batches_per_epoch: int = 1


@dataclass
class LatentState:
    h: np.ndarray
    s: np.ndarray
    s_mean: np.ndarray
    s_std: np.ndarray

    @classmethod
    def zeros(cls, config: RSSMConfig) -> LatentState:
        dt = np.dtype(config.dtype)
        return cls(
            h=np.zeros(config.deter_size, dt),
            s=np.zeros(config.stoch_size, dt),
            s_mean=np.zeros(config.stoch_size, dt),
            s_std=np.ones(config.stoch_size, dt),
        )


@dataclass
class LossBreakdown:
    reconstruction_nll: float
    reward_nll: float
    kl_raw: float
    kl_regularized: float
    total: float

    @classmethod
    def mean_of(cls, items: list[LossBreakdown]) -> LossBreakdown:
        if not items:
            raise UsageError("cannot average an empty list of losses")
        return cls(**{f.name: float(np.mean([getattr(i, f.name) for i in items])) for f in fields(cls)})


@dataclass
class FilterResult:
    """Per-step latents and distribution parameters, each ``(B, T, D)``."""

    h: Value
    s: Value
    prior_mean: Value
    prior_std: Value
    post_mean: Value
    post_std: Value

    def last_state(self, index: int = 0) -> LatentState:
        return LatentState(
            h=self.h.data[index, -1].copy(),
            s=self.s.data[index, -1].copy(),
            s_mean=self.post_mean.data[index, -1].copy(),
            s_std=self.post_std.data[index, -1].copy(),
        )


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class RSSM:
    """The world model.  Parameters live in ``self.params`` keyed ``component.layer.kind``."""

    components = ("encoder", "transition", "prior", "posterior", "decoder", "reward")

    def __init__(self, config: RSSMConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Value] = {}
        c = config
        dt = np.dtype(c.dtype)

        def add(name: str, shape: tuple[int, ...], fan_in: int) -> None:
            self.params[name] = Value(_uniform(rng, shape, fan_in, dt), requires_grad=True, name=name)

        def add_dense(name: str, n_in: int, n_out: int) -> None:
            add(f"{name}.w", (n_in, n_out), n_in)
            add(f"{name}.b", (n_out,), n_in)

        in_ch = c.obs_shape[0]
        for i, (ch, k) in enumerate(zip(c.enc_channels, c.enc_kernels)):
            add(f"encoder.conv{i}.w", (ch, in_ch, k, k), in_ch * k * k)
            add(f"encoder.conv{i}.b", (ch,), in_ch * k * k)
            in_ch = ch
        add_dense("encoder.out", c.flat_features, c.embed_size)

        add_dense("transition.embed", c.stoch_size + c.num_actions, c.hidden_size)
        h3 = 3 * c.deter_size
        add("transition.gru.w_ih", (c.hidden_size, h3), c.deter_size)
        add("transition.gru.w_hh", (c.deter_size, h3), c.deter_size)
        add("transition.gru.b_ih", (h3,), c.deter_size)
        add("transition.gru.b_hh", (h3,), c.deter_size)

        add_dense("prior.hidden", c.deter_size, c.hidden_size)
        add_dense("prior.out", c.hidden_size, 2 * c.stoch_size)
        add_dense("posterior.hidden", c.deter_size + c.embed_size, c.hidden_size)
        add_dense("posterior.out", c.hidden_size, 2 * c.stoch_size)

        latent = c.deter_size + c.stoch_size
        add_dense("decoder.in", latent, c.dec_embed_size)
        in_ch = c.dec_embed_size
        for i, (ch, k) in enumerate(zip(c.dec_channels, c.dec_kernels)):
            add(f"decoder.deconv{i}.w", (in_ch, ch, k, k), ch * k * k)
            add(f"decoder.deconv{i}.b", (ch,), ch * k * k)
            in_ch = ch

        add_dense("reward.l0", latent, c.hidden_size)
        add_dense("reward.l1", c.hidden_size, c.hidden_size)
        add_dense("reward.l2", c.hidden_size, 1)

    # -- parameter plumbing -------------------------------------------------

    def p(self, name: str) -> Value:
        return self.params[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def component_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, v in self.params.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(v.data).tobytes())
        return digest.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays(), {"rssm_config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> RSSM:
        arrays, meta = load_checkpoint(path)
        config = RSSMConfig.from_dict(meta["rssm_config"])
        model = cls(config, seed=0)
        if set(arrays) != set(model.params):
            raise UsageError(f"checkpoint parameters do not match the model: {sorted(set(arrays) ^ set(model.params))}")
        for name, arr in arrays.items():
            if arr.shape != model.params[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {model.params[name].shape}")
            model.params[name].data = arr.astype(config.dtype)
        return model

    def _dense(self, name: str, x: Value) -> Value:
        return dense(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _cast(self, x) -> np.ndarray:
        return np.asarray(x, dtype=self.config.dtype)

    # -- network pieces -----------------------------------------------------

    def encode(self, observations) -> Value:
        """``(B, C, H, W)`` frames to ``(B, embed_size)`` embeddings."""
        c = self.config
        x = observations if isinstance(observations, Value) else Value(self._cast(observations))
        if x.ndim == 3:
            x = x.reshape((1, *x.shape))
        if tuple(x.shape[1:]) != c.obs_shape:
            raise ShapeError(f"encode: expected frames of shape {c.obs_shape}, got {tuple(x.shape[1:])}")
        return self._encode_cm(transpose(x, (1, 2, 3, 0)))

    def _encode_cm(self, x: Value) -> Value:
        """Channel-major ``(C, H, W, B)`` frames to ``(B, embed_size)``."""
        c = self.config
        b = x.shape[-1]
        for i in range(len(c.enc_channels)):
            x = relu(conv2d_cm(x, self.params[f"encoder.conv{i}.w"], self.params[f"encoder.conv{i}.b"], stride=c.stride))
        x = transpose(x.reshape((c.flat_features, b)), (1, 0))
        return self._dense("encoder.out", x)

    def transition(self, h: Value, s: Value, action_onehot) -> Value:
        """Deterministic recurrent update ``h_t = f(h_{t-1}, s_{t-1}, a_{t-1})``."""
        a = action_onehot if isinstance(action_onehot, Value) else Value(self._cast(action_onehot))
        x = relu(self._dense("transition.embed", concat([s, a], axis=-1)))
        gru = {k: self.params[f"transition.gru.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")}
        return gated_recurrent_cell(x, h, gru)

    def _gaussian_head(self, name: str, x: Value) -> tuple[Value, Value]:
        out = self._dense(f"{name}.out", relu(self._dense(f"{name}.hidden", x)))
        n = self.config.stoch_size
        return out[:, :n], softplus(out[:, n:]) + self.config.min_std

    def prior(self, h: Value) -> tuple[Value, Value]:
        return self._gaussian_head("prior", h)

    def posterior(self, h: Value, embedding: Value) -> tuple[Value, Value]:
        return self._gaussian_head("posterior", concat([h, embedding], axis=-1))

    def decode_observation(self, h: Value, s: Value) -> Value:
        """Mean frame ``(B, C, H, W)`` of the unit-variance observation Gaussian."""
        return transpose(self._decode_cm(h, s), (3, 0, 1, 2))

    def _decode_cm(self, h: Value, s: Value) -> Value:
        c = self.config
        x = self._dense("decoder.in", concat([h, s], axis=-1))
        x = transpose(x, (1, 0)).reshape((c.dec_embed_size, 1, 1, x.shape[0]))
        last = len(c.dec_channels) - 1
        for i in range(last + 1):
            x = deconv2d_cm(x, self.params[f"decoder.deconv{i}.w"], self.params[f"decoder.deconv{i}.b"], stride=c.stride)
            if i < last:
                x = relu(x)
        return x

    def predict_reward(self, h: Value, s: Value) -> Value:
        """Mean of the unit-variance reward Gaussian, shape ``(B,)``."""
        x = relu(self._dense("reward.l0", concat([h, s], axis=-1)))
        x = relu(self._dense("reward.l1", x))
        out = self._dense("reward.l2", x)
        return out.reshape((out.shape[0],))

    # -- sequences ----------------------------------------------------------

    def filter(
        self,
        observations,
        actions,
        initial: LatentState | None = None,
        noise: np.ndarray | None = None,
        *,
        frames_cm: np.ndarray | None = None,
    ) -> FilterResult:
        """Posterior filtering over ``(B, T, C, H, W)`` frames.

        ``actions`` is either ``(B, T)`` previous actions aligned with the frames
        or ``(B, T - 1)`` actions between frames, in which case the first step
        receives no action.  ``noise=None`` samples at the posterior mean.
        ``frames_cm`` optionally supplies the same frames already flattened to
        the channel-major ``(C, H, W, B*T)`` layout.
        """
        c = self.config
        obs = self._cast(observations)
        if obs.ndim != 5:
            raise ShapeError(f"filter expects (B, T, C, H, W) frames, got {obs.shape}")
        b, t = obs.shape[:2]
        acts = np.asarray(actions, dtype=np.int64)
        if acts.ndim != 2 or acts.shape[0] != b:
            raise UsageError(f"filter: actions of shape {acts.shape} do not match {b} sequences")
        if acts.shape[1] == t - 1:
            acts = np.concatenate([np.full((b, 1), -1), acts], axis=1)
        elif acts.shape[1] != t:
            raise UsageError(f"filter: {acts.shape[1]} actions for {t} observations")
        if noise is None:
            noise = np.zeros((b, t, c.stoch_size), dtype=c.dtype)
        elif noise.shape != (b, t, c.stoch_size):
            raise ShapeError(f"filter: noise shape {noise.shape} != {(b, t, c.stoch_size)}")
        if frames_cm is None:
            frames_cm = np.ascontiguousarray(np.moveaxis(obs.reshape(b * t, *obs.shape[2:]), 0, -1))
        embed = self._encode_cm(Value(frames_cm)).reshape((b, t, c.embed_size))
        onehot = one_hot(acts, c.num_actions, dtype=c.dtype)
        if initial is None:
            h = Value(np.zeros((b, c.deter_size), c.dtype))
            s = Value(np.zeros((b, c.stoch_size), c.dtype))
        else:
            h = Value(np.broadcast_to(self._cast(initial.h), (b, c.deter_size)).copy())
            s = Value(np.broadcast_to(self._cast(initial.s), (b, c.stoch_size)).copy())
        hs, ss, pms, pss, qms, qss = [], [], [], [], [], []
        for step in range(t):
            h = self.transition(h, s, onehot[:, step])
            pm, ps = self.prior(h)
            qm, qs = self.posterior(h, embed[:, step])
            s = gaussian_sample(qm, qs, noise[:, step])
            for acc, v in zip((hs, ss, pms, pss, qms, qss), (h, s, pm, ps, qm, qs)):
                acc.append(v)
        return FilterResult(*(stack(acc, axis=1) for acc in (hs, ss, pms, pss, qms, qss)))

    def observe_step(
        self,
        latent: LatentState | None,
        prev_action: int,
        observation: np.ndarray,
        noise: np.ndarray | None = None,
    ) -> LatentState:
        """Advance the filter by one real observation (no graph recorded)."""
        with no_grad():
            result = self.filter(
                observation[None, None],
                np.array([[prev_action]]),
                initial=latent,
                noise=None if noise is None else noise.reshape(1, 1, -1),
            )
        return result.last_state()

    def rollout_rewards(self, start: LatentState, actions: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Open-loop prior rollouts: ``actions (N, H)`` and ``noise (N, M, H, D)`` to rewards ``(N, M, H)``."""
        c = self.config
        actions = np.asarray(actions, dtype=np.int64)
        n, horizon = actions.shape
        if noise.ndim != 4 or noise.shape[0] != n or noise.shape[2] != horizon or noise.shape[3] != c.stoch_size:
            raise UsageError(f"rollout_rewards: noise shape {noise.shape} incompatible with actions {actions.shape}")
        if np.shape(start.h) != (c.deter_size,) or np.shape(start.s) != (c.stoch_size,):
            raise UsageError(
                f"rollout_rewards: latent dims {np.shape(start.h)}/{np.shape(start.s)} "
                f"!= model {c.deter_size}/{c.stoch_size}"
            )
        m = noise.shape[1]
        batch = n * m
        acts = np.repeat(actions, m, axis=0)
        eps = self._cast(noise).reshape(batch, horizon, c.stoch_size)
        onehot = one_hot(acts, c.num_actions, dtype=c.dtype)
        rewards = np.empty((batch, horizon), dtype=c.dtype)
        with no_grad():
            h = Value(np.tile(self._cast(start.h), (batch, 1)))
            s = Value(np.tile(self._cast(start.s), (batch, 1)))
            for step in range(horizon):
                h = self.transition(h, s, onehot[:, step])
                pm, ps = self.prior(h)
                s = Value(pm.data + ps.data * eps[:, step])
                rewards[:, step] = self.predict_reward(h, s).data
        return rewards.reshape(n, m, horizon)

    @property
    def noise_dim(self) -> int:
        return self.config.stoch_size

    def imagine(self, start: LatentState, actions, noise: np.ndarray | None = None) -> np.ndarray:
        """Predicted rewards ``r_{t+1..t+H}`` for one action sequence."""
        actions = np.asarray(actions, dtype=np.int64).reshape(1, -1)
        horizon = actions.shape[1]
        if horizon == 0:
            return np.zeros(0, dtype=self.config.dtype)
        if noise is None:
            noise = np.zeros((horizon, self.config.stoch_size))
        return self.rollout_rewards(start, actions, np.asarray(noise).reshape(1, 1, horizon, -1))[0, 0]

    # -- objective ----------------------------------------------------------

    def elbo_loss(self, batch: SegmentBatch, noise: np.ndarray | None, train: TrainConfig = TrainConfig()) -> tuple[Value, LossBreakdown]:
        """Negative ELBO: summed over time, averaged over the batch."""
        obs = self._cast(batch.observations)
        rewards = self._cast(batch.rewards)
        actions = np.asarray(batch.actions)
        if obs.ndim != 5 or actions.shape != obs.shape[:2] or rewards.shape != obs.shape[:2]:
            raise UsageError(
                f"misaligned batch: observations {obs.shape}, actions {actions.shape}, rewards {rewards.shape}"
            )
        b, t = obs.shape[:2]
        frames = np.ascontiguousarray(np.moveaxis(obs.reshape(b * t, *obs.shape[2:]), 0, -1))
        post = self.filter(obs, actions, noise=noise, frames_cm=frames)
        flat_h = post.h.reshape((b * t, self.config.deter_size))
        flat_s = post.s.reshape((b * t, self.config.stoch_size))
        recon = self._decode_cm(flat_h, flat_s)
        recon_nll = square(recon - frames).sum() * (0.5 / b)
        reward_pred = self.predict_reward(flat_h, flat_s)
        reward_nll = square(reward_pred - rewards.reshape(b * t)).sum() * (0.5 / b)
        kl = gaussian_kl(post.post_mean, post.post_std, post.prior_mean, post.prior_std)
        kl_raw = kl.sum() * (1.0 / b)
        kl_reg = maximum(kl, train.free_nats).sum() * (train.kl_weight / b)
        total = recon_nll + reward_nll + kl_reg
        parts = LossBreakdown(
            reconstruction_nll=float(recon_nll.data),
            reward_nll=float(reward_nll.data),
            kl_raw=float(kl_raw.data),
            kl_regularized=float(kl_reg.data),
            total=float(total.data),
        )
        return total, parts


@dataclass
class Trainer:
    """Owns the optimizer state and the noise stream for one model."""

    model: RSSM
    config: TrainConfig = field(default_factory=TrainConfig)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    optimizer: AdamState = field(init=False)
    last_grad_norm: float = field(init=False, default=0.0)

    def __post_init__(self) -> None:
        self.optimizer = AdamState(learning_rate=self.config.learning_rate, epsilon=self.config.epsilon)

    def train_step(self, batch: SegmentBatch) -> LossBreakdown:
        model = self.model
        noise = self.rng.standard_normal(
            (*np.shape(batch.actions), model.config.stoch_size)
        ).astype(model.config.dtype)
        total, parts = model.elbo_loss(batch, noise, self.config)
        model.zero_grad()
        total.backward()
        names = list(model.params)
        grads = model.grads()
        clipped, self.last_grad_norm = clip_grad_norm([grads[k] for k in names], self.config.grad_clip)
        adam_step(model.arrays(), dict(zip(names, clipped)), self.optimizer)
        return parts

    def train_epoch(self, buffer: ReplayBuffer) -> LossBreakdown:
        return train_epoch(buffer, self)


def train_epoch(buffer: ReplayBuffer, trainer: Trainer) -> LossBreakdown:
    """One epoch of ``batches_per_epoch`` sampled batches; returns the mean loss."""
    cfg = trainer.config
    if buffer.num_episodes == 0:
        raise UsageError("cannot train on an empty replay buffer")
    losses = []
    for _ in range(cfg.batches_per_epoch):
        batch = buffer.sample_batch(cfg.batch_size, cfg.seq_len, trainer.rng)
        losses.append(trainer.train_step(batch))
    return LossBreakdown.mean_of(losses)
