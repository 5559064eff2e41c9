"""Pixel-space DDPM with a small two-level U-Net, staged training and the forecast sampler.

Frames in [0, 1] are mapped to [-1, 1] before noising. The U-Net predicts the
noise ``eps``. Its decoder skips can be offset by per-level control signals;
the control module turns the encoder features of the history frames (and,
in the full mode, the semantic vector) into those signals.

Stages:
    0  pretrain the U-Net as an unconditional denoiser, then freeze it
    1  train the structural control path (semantic path bypassed)
    2  train the semantic / temporal parameters, constant learning rate
    3  same partition, cosine-decayed learning rate
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import control, temporal_tokens
from .config import RunConfig
from .core import ops
from .core.optim import adamw_step, clip_grad_norm, cosine_lr
from .core.params import FROZEN, PRETRAIN, SEMANTIC_TEMPORAL, STRUCTURAL, ParamStore
from .core.tape import Tape, Var, as_var
from .errors import ArityError, ConfigurationError, DimensionError, DomainError, StateError
from .sits_io import SitsSequence

BETA_START = 1e-4
BETA_END = 0.02
STAGES = (0, 1, 2, 3)
STAGE_META = "completed_stage"


# -- noise schedule ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def posterior_variance(self, t: int) -> float:
        if t == 0:
            return 0.0
        ab, ab_prev = self.alphas_cumprod[t], self.alphas_cumprod[t - 1]
        return float(self.betas[t] * (1.0 - ab_prev) / (1.0 - ab))


def make_noise_schedule(steps: int = 100) -> NoiseSchedule:
    if steps < 2:
        raise ConfigurationError(f"a noise schedule needs at least 2 steps, got {steps}")
    betas = np.linspace(BETA_START, BETA_END, steps)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be a per-item index array."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.steps):
        raise IndexError(f"diffusion step {t} outside [0, {sched.steps})")
    ab = sched.alphas_cumprod[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t w_k), cos(t w_k)]`` with geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def to_model_space(frames) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) * 2.0 - 1.0


def to_image_space(x) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


# -- U-Net -----------------------------------------------------------------------

def _he(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain * math.sqrt(2.0 / fan_in), shape)


def init_unet(store: ParamStore, rng: np.random.Generator, cfg: RunConfig) -> None:
    chans, C, E = cfg.unet_channels, cfg.channels, cfg.temb_dim
    p = PRETRAIN
    store.add("unet.temb.w1", _he(rng, (E, E), E), p)
    store.add("unet.temb.b1", np.zeros(E), p)
    for l, ch in enumerate(chans):
        store.add(f"unet.temb.l{l}.w", rng.normal(0.0, 1.0 / math.sqrt(E), (E, ch)), p)
        store.add(f"unet.temb.l{l}.b", np.zeros(ch), p)
    store.add("unet.in.w", _he(rng, (chans[0], C, 3, 3), C * 9), p)
    store.add("unet.in.b", np.zeros(chans[0]), p)
    prev = chans[0]
    for l, ch in enumerate(chans):
        store.add(f"unet.enc{l}.conv1.w", _he(rng, (ch, prev, 3, 3), prev * 9), p)
        store.add(f"unet.enc{l}.conv1.b", np.zeros(ch), p)
        store.add(f"unet.enc{l}.conv2.w", _he(rng, (ch, ch, 3, 3), ch * 9), p)
        store.add(f"unet.enc{l}.conv2.b", np.zeros(ch), p)
        prev = ch
    store.add("unet.mid.w", _he(rng, (prev, prev, 3, 3), prev * 9), p)
    store.add("unet.mid.b", np.zeros(prev), p)
    for l in reversed(range(len(chans))):
        c_in = (chans[l + 1] if l + 1 < len(chans) else chans[l]) + chans[l]
        store.add(f"unet.dec{l}.w", _he(rng, (chans[l], c_in, 3, 3), c_in * 9), p)
        store.add(f"unet.dec{l}.b", np.zeros(chans[l]), p)
    store.add("unet.out.w", _he(rng, (C, chans[0], 3, 3), chans[0] * 9, gain=0.1), p)
    store.add("unet.out.b", np.zeros(C), p)


def _levels(store: ParamStore) -> int:
    n = 0
    while f"unet.enc{n}.conv1.w" in store:
        n += 1
    return n


def _time_biases(t, store: ParamStore, dim: int, levels: int) -> list[Var]:
    emb = timestep_embedding(t, dim)
    h = ops.dense_apply(emb, store.var("unet.temb.w1"), store.var("unet.temb.b1"), "silu")
    out = []
    for l in range(levels):
        b = ops.dense_apply(h, store.var(f"unet.temb.l{l}.w"), store.var(f"unet.temb.l{l}.b"))
        out.append(ops.reshape(b, b.shape + (1, 1)))
    return out


def _conv(x, store: ParamStore, name: str) -> Var:
    return ops.conv2d_apply(x, store.var(f"{name}.w"), store.var(f"{name}.b"))


def unet_encode(x, t, store: ParamStore) -> list[Var]:
    """Encoder features (the skip tensors) of ``x[B, C, H, W]`` at diffusion step ``t``."""
    x = as_var(x)
    if x.ndim != 4 or x.shape[1] != store["unet.in.w"].shape[1]:
        raise DimensionError(f"U-Net input must be [B, {store['unet.in.w'].shape[1]}, H, W], got {x.shape}")
    levels = _levels(store)
    t = np.broadcast_to(np.asarray(t), (x.shape[0],))
    temb = _time_biases(t, store, store["unet.temb.w1"].shape[0], levels)
    h = _conv(x, store, "unet.in")
    skips = []
    for l in range(levels):
        if l > 0:
            h = ops.avgpool2(h)
        h = ops.silu(ops.add(_conv(h, store, f"unet.enc{l}.conv1"), temb[l]))
        h = ops.silu(_conv(h, store, f"unet.enc{l}.conv2"))
        skips.append(h)
    return skips


def unet_decode(skips: Sequence[Var], store: ParamStore) -> Var:
    levels = len(skips)
    h = ops.silu(_conv(skips[-1], store, "unet.mid"))
    for l in reversed(range(levels)):
        if l < levels - 1:
            h = ops.upsample2(h)
        h = ops.silu(_conv(ops.concat([h, skips[l]], axis=1), store, f"unet.dec{l}"))
    return _conv(h, store, "unet.out")


def inject_controls(skips: Sequence[Var], controls: Sequence) -> list[Var]:
    """``skip_l + control_l`` for every level."""
    if len(controls) != len(skips):
        raise DimensionError(f"{len(controls)} control tensors for {len(skips)} U-Net levels")
    out = []
    for skip, c in zip(skips, controls):
        c = as_var(c)
        if c.shape != skip.shape:
            raise DimensionError(f"control {c.shape} does not match skip features {skip.shape}")
        out.append(ops.add(skip, c))
    return out


def unet_denoise(x_t, t, store: ParamStore, controls: Sequence | None = None) -> Var:
    """Predicted noise for ``x_t[B, C, H, W]``.

    ``controls`` holds one time-aggregated control tensor ``[B, C_l, H_l, W_l]``
    per level, added to that level's skip features.
    """
    skips = unet_encode(x_t, t, store)
    if controls is not None:
        skips = inject_controls(skips, controls)
    return unet_decode(skips, store)


def encode_history(history, t, store: ParamStore) -> list[Var]:
    """Frozen-encoder features of ``history[B, T, H, W, C]`` (in [0, 1]) as ``[B, C_l, T, H_l, W_l]``."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 5:
        raise DimensionError(f"history must be [B, T, H, W, C], got {history.shape}")
    B, T, H, W, C = history.shape
    x = to_model_space(history).transpose(0, 1, 4, 2, 3).reshape(B * T, C, H, W)
    t_rep = np.repeat(np.broadcast_to(np.asarray(t), (B,)), T)
    out = []
    for f in unet_encode(x, t_rep, store):
        _, Cl, Hl, Wl = f.shape
        out.append(ops.transpose(ops.reshape(f, (B, T, Cl, Hl, Wl)), (0, 2, 1, 3, 4)))
    return out


@dataclass
class Conditioning:
    """History batch the control module is conditioned on.

    ``features`` caches the encoder features of the clean history frames; they
    only depend on the frozen U-Net, so they are computed once per batch and
    carry no gradient. ``semantic`` optionally pins the semantic vector, which
    the sampler does because nothing trains during sampling.
    """

    frames: np.ndarray       # [B, T, H, W, C] in [0, 1]
    timestamps: np.ndarray   # [B, T] days
    horizon: np.ndarray      # [B] days from the last frame to the forecast
    features: list[np.ndarray] | None = None
    semantic: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.horizon = np.asarray(self.horizon, dtype=np.float64)
        if self.frames.ndim != 5 or self.timestamps.shape != self.frames.shape[:2]:
            raise DimensionError("conditioning frames must be [B, T, H, W, C] with [B, T] timestamps")
        if self.horizon.shape != self.frames.shape[:1]:
            raise DimensionError("need one horizon per batch item")

    def take(self, idx) -> "Conditioning":
        feats = None if self.features is None else [f[idx] for f in self.features]
        sem = None if self.semantic is None else self.semantic[idx]
        return Conditioning(self.frames[idx], self.timestamps[idx], self.horizon[idx], feats, sem)

    def history_features(self, store: ParamStore) -> list[np.ndarray]:
        if self.features is None:
            self.features = [f.value for f in encode_history(self.frames, 0, store)]
        return self.features


def compute_controls(cond: Conditioning, skips: Sequence[Var], t, store: ParamStore, cfg: RunConfig,
                     mode: str, rng: np.random.Generator | None = None) -> list[Var]:
    """Per-level control tensors, already averaged over the time axis.

    The control input of level ``l`` stacks the history features along time
    and, with ``control_sees_xt``, appends the skip features of the noisy
    input as a last slice.
    """
    h_enc = cond.history_features(store)
    m = None
    if mode == control.FULL:
        m = cond.semantic
        if m is None:
            m = temporal_tokens.semantic_vector(cond.frames, cond.timestamps, cond.horizon, store)
    temb = None
    if cfg.control_temb:
        temb = timestep_embedding(np.broadcast_to(np.asarray(t), (len(cond.horizon),)), cfg.temb_dim)
    out = []
    for l, h in enumerate(h_enc):
        h = as_var(h)
        if cfg.control_sees_xt:
            B, C, _, H, W = h.shape
            h = ops.concat([h, ops.reshape(skips[l], (B, C, 1, H, W))], axis=2)
        z = control.control_level(h, m, store, l, cfg.heads, mode, dropout=cfg.dropout, rng=rng, temb=temb)
        out.append(control.aggregate_time(z))
    return out


def predict_noise(x_t, t, store: ParamStore, cfg: RunConfig, cond: Conditioning | None = None,
                  mode: str | None = None, rng: np.random.Generator | None = None) -> Var:
    """``eps_hat``; ``mode`` is ``None`` (bare U-Net), ``"structural"`` or ``"full"``."""
    if mode is None:
        return unet_denoise(x_t, t, store)
    if mode not in control.MODES:
        raise ConfigurationError(f"unknown control mode {mode!r}")
    if cond is None:
        raise ConfigurationError("control modes need a conditioning history")
    skips = unet_encode(x_t, t, store)
    controls = compute_controls(cond, skips, t, store, cfg, mode, rng)
    return unet_decode(inject_controls(skips, controls), store)


# -- model construction ----------------------------------------------------------

def init_model(cfg: RunConfig, seed: int = 0) -> ParamStore:
    """Fresh parameters: U-Net (pretrain partition), control levels and temporal tokens."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7a11]))
    store = ParamStore()
    init_unet(store, rng, cfg)
    for lc in control.level_configs(cfg):
        control.init_control_level(store, rng, lc)
    temporal_tokens.init_temporal_tokens(
        store, rng, frame_dim=cfg.image_size * cfg.image_size * cfg.channels,
        d_tok=cfg.d_tok, pte_hidden=cfg.pte_hidden, d_cond=cfg.d_cond,
    )
    store.meta[STAGE_META] = -1
    return store


# -- staged training -------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: int
    partitions: tuple[str, ...]
    schedule: str          # "constant" or "cosine"
    steps: int
    batch_size: int
    lr: float
    lr_min: float = 0.0
    mode: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}, got {self.stage}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("need steps >= 0, batch_size >= 1, lr > 0")

    @classmethod
    def from_run_config(cls, stage: int, cfg: RunConfig) -> "StageConfig":
        if stage == 0:
            return cls(0, (PRETRAIN,), "constant", cfg.steps_stage0, cfg.batch_size, cfg.lr_stage0)
        if stage == 1:
            return cls(1, (STRUCTURAL,), "constant", cfg.steps_stage1, cfg.batch_size, cfg.lr,
                       mode=control.STRUCTURAL_ONLY)
        if stage == 2:
            return cls(2, (SEMANTIC_TEMPORAL,), "constant", cfg.steps_stage2, cfg.batch_size, cfg.lr,
                       mode=control.FULL)
        if stage == 3:
            return cls(3, (SEMANTIC_TEMPORAL,), "cosine", cfg.steps_stage3, cfg.batch_size, cfg.lr,
                       cfg.lr_min, mode=control.FULL)
        raise ConfigurationError(f"stage must be one of {STAGES}, got {stage}")

    def lr_at(self, step: int) -> float:
        if self.schedule == "cosine":
            return cosine_lr(step, self.steps, self.lr, self.lr_min)
        return self.lr


@dataclass
class TrainReport:
    stage: int
    steps: int
    loss: list[float] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {"stage": self.stage, "steps": self.steps, "loss": list(self.loss),
                "seed": self.seed, "config_hash": self.config_hash}


@dataclass
class TrainingData:
    """Fixed-length windows cut from a dataset: ``input_length`` history frames plus the next frame."""

    history: np.ndarray      # [N, T, H, W, C]
    timestamps: np.ndarray   # [N, T]
    target: np.ndarray       # [N, H, W, C]
    target_ts: np.ndarray    # [N]

    def __len__(self) -> int:
        return len(self.target)

    @classmethod
    def from_sequences(cls, data: Sequence[SitsSequence], input_length: int) -> "TrainingData":
        hist, stamps, tgt, tgt_ts = [], [], [], []
        for seq in data:
            for start in range(len(seq) - input_length):
                window = seq.frames[start:start + input_length + 1]
                ts = seq.timestamps[start:start + input_length + 1]
                hist.append(np.stack(window[:-1]))
                stamps.append(ts[:-1])
                tgt.append(window[-1])
                tgt_ts.append(ts[-1])
        if not tgt:
            raise DomainError(f"no sequence has more than input_length={input_length} frames")
        return cls(np.stack(hist), np.asarray(stamps, dtype=np.float64), np.stack(tgt),
                   np.asarray(tgt_ts, dtype=np.float64))

    def conditioning(self, idx) -> Conditioning:
        return Conditioning(self.history[idx], self.timestamps[idx],
                            self.target_ts[idx] - self.timestamps[idx, -1])


def diffusion_loss(x0, t, eps, store: ParamStore, cfg: RunConfig, sched: NoiseSchedule,
                   cond: Conditioning | None = None, mode: str | None = None,
                   rng: np.random.Generator | None = None) -> Var:
    """``mean((eps - eps_hat)^2)`` for clean model-space images ``x0[B, C, H, W]``."""
    x_t = q_sample(x0, t, eps, sched)
    return ops.mse(predict_noise(x_t, t, store, cfg, cond, mode, rng), eps)


def _check_prerequisite(stage: int, store: ParamStore) -> None:
    done = int(store.meta.get(STAGE_META, -1))
    if stage == 0:
        if done >= 0 or not store.names(PRETRAIN, "unet."):
            raise StateError("stage 0 needs a freshly initialised model")
        return
    if done < stage - 1:
        raise StateError(f"stage {stage} needs a checkpoint that completed stage {stage - 1} "
                         f"(this one completed stage {done})")
    if store.names(PRETRAIN):
        raise StateError(f"stage {stage} needs pretrained, frozen U-Net weights (run stage 0 first)")


def train_stage(stage_cfg: StageConfig, data: Sequence[SitsSequence], store: ParamStore,
                cfg: RunConfig, seed: int = 0, log_every: int = 0, log=print) -> TrainReport:
    """Run one training stage in place on ``store`` and return the per-step loss curve."""
    if not data:
        raise DomainError("training data is empty")
    _check_prerequisite(stage_cfg.stage, store)
    windows = TrainingData.from_sequences(data, cfg.input_length)
    sched = make_noise_schedule(cfg.diffusion_steps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, stage_cfg.stage, 0x5eed]))
    drop_rng = rng if cfg.dropout > 0 else None
    report = TrainReport(stage_cfg.stage, stage_cfg.steps, [], seed, cfg.hash)

    store.set_trainable(*stage_cfg.partitions)
    # optimiser moments start fresh each stage (they are not checkpointed)
    for name in store.names():
        if store.is_trainable(name):
            e = store.entry(name)
            e.m[...] = 0.0
            e.v[...] = 0.0
            e.step = 0
    store.zero_grad()
    all_cond = windows.conditioning(np.arange(len(windows))) if stage_cfg.stage > 0 else None
    if all_cond is not None:
        all_cond.history_features(store)
    n = len(windows)
    B = stage_cfg.batch_size
    for step in range(stage_cfg.steps):
        idx = rng.choice(n, size=B, replace=n < B)
        t = rng.integers(0, sched.steps, size=B)
        if stage_cfg.stage == 0:
            # unconditional: every frame of a window is a training image
            frames = np.concatenate([windows.history[idx], windows.target[idx][:, None]], axis=1)
            pick = rng.integers(0, frames.shape[1], size=B)
            x0 = to_model_space(frames[np.arange(B), pick]).transpose(0, 3, 1, 2)
            cond = None
        else:
            x0 = to_model_space(windows.target[idx]).transpose(0, 3, 1, 2)
            cond = all_cond.take(idx)
        eps = rng.standard_normal(x0.shape)
        with Tape() as tape:
            loss = diffusion_loss(x0, t, eps, store, cfg, sched, cond, stage_cfg.mode, drop_rng)
        tape.backward(loss)
        if cfg.max_grad_norm > 0:
            clip_grad_norm(store, cfg.max_grad_norm)
        adamw_step(store, stage_cfg.lr_at(step), weight_decay=cfg.weight_decay)
        report.loss.append(float(loss.value))
        if log_every and (step + 1) % log_every == 0:
            tail = report.loss[-log_every:]
            log(f"stage {stage_cfg.stage} step {step + 1}/{stage_cfg.steps} loss {sum(tail) / len(tail):.5f}")
    store.set_trainable()
    if stage_cfg.stage == 0:
        store.retag("unet.", FROZEN)
    store.meta[STAGE_META] = max(int(store.meta.get(STAGE_META, -1)), stage_cfg.stage)
    return report


# -- sampling ----------------------------------------------------------------------

def _default_horizon(timestamps: Sequence[int]) -> float:
    return float(timestamps[-1] - timestamps[-2])


def sample_forecasts(histories: Sequence[SitsSequence], store: ParamStore, cfg: RunConfig,
                     seed: int = 0, horizons: Sequence[float] | None = None,
                     mode: str = control.FULL, sched: NoiseSchedule | None = None) -> np.ndarray:
    """Ancestral sampling of the next frame for every history; returns ``[N, H, W, C]`` in [0, 1].

    The reverse chain starts from the last history frame noised to the final
    step. Item ``i`` draws its noise from ``SeedSequence([seed, i])``.
    ``horizons`` defaults to the last observed gap of each history.
    """
    sched = sched or make_noise_schedule(cfg.diffusion_steps)
    if not histories:
        return np.zeros((0, cfg.image_size, cfg.image_size, cfg.channels))
    for h in histories:
        if len(h) != cfg.input_length:
            raise ArityError(f"{h.id or 'history'}: expected {cfg.input_length} frames, got {len(h)}")
    if horizons is None:
        horizons = [_default_horizon(h.timestamps) for h in histories]
    if len(horizons) != len(histories):
        raise ArityError(f"{len(horizons)} horizons for {len(histories)} histories")
    if any(not hz > 0 for hz in horizons):
        raise DomainError("forecast horizon must be positive")
    cond = Conditioning(np.stack([h.stack() for h in histories]),
                        np.asarray([h.timestamps for h in histories], dtype=np.float64),
                        np.asarray(horizons, dtype=np.float64))
    cond.history_features(store)
    if mode == control.FULL:
        cond.semantic = temporal_tokens.semantic_vector(cond.frames, cond.timestamps, cond.horizon, store).value
    N = len(histories)
    rngs = [np.random.default_rng(np.random.SeedSequence([seed, i])) for i in range(N)]
    shape = to_model_space(histories[0].frames[-1]).transpose(2, 0, 1).shape

    def noise() -> np.ndarray:
        return np.stack([r.standard_normal(shape) for r in rngs])

    last = to_model_space(cond.frames[:, -1]).transpose(0, 3, 1, 2)
    T = sched.steps
    x = q_sample(last, np.full(N, T - 1), noise(), sched)
    for t in reversed(range(T)):
        eps_hat = predict_noise(x, np.full(N, t), store, cfg, cond, mode).value
        beta, ab = sched.betas[t], sched.alphas_cumprod[t]
        mean = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 0:
            x = mean + math.sqrt(sched.posterior_variance(t)) * noise()
        else:
            x = mean
    return to_image_space(x.transpose(0, 2, 3, 1))


def sample_forecast(history: SitsSequence, store: ParamStore, cfg: RunConfig, seed: int = 0,
                    horizon: float | None = None, mode: str = control.FULL,
                    sched: NoiseSchedule | None = None) -> np.ndarray:
    """Single-history convenience wrapper; returns ``[H, W, C]`` in [0, 1]."""
    hz = None if horizon is None else [horizon]
    return sample_forecasts([history], store, cfg, seed, hz, mode, sched)[0]
