"""Semantic-fused control injection.

Per U-Net level ``l`` the control module turns encoder features of the
history frames ``h_enc[B, C, T, H, W]`` and the semantic vector ``m[B, d_cond]``
into a control tensor added to the decoder skip features:

    h_ctrl = conv3d(silu(conv3d(h_enc) + temb))           structural path
    s_proj = MLP(m);  s = tile(s_proj)                    semantic path
    g      = tile(sigmoid(Gate(s_proj)))
    f      = (1 - g) * h_ctrl + g * s                     gated fusion
    z      = a * unpsi(attn(psi(f))) + (1 - a) * f        temporal refinement
    skip'  = skip + mean_T(z)

``temb`` is an optional per-item bias computed from the diffusion timestep
embedding (as in the U-Net encoder blocks); levels built with ``temb_dim = 0``
have none. ``a = sigmoid(alpha_raw)`` keeps the mixing weight strictly inside (0, 1).
The structural convolutions belong to the ``structural`` partition,
everything else to ``semantic_temporal``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.params import SEMANTIC_TEMPORAL, STRUCTURAL, ParamStore
from .core.tape import Var, as_var
from .errors import ConfigurationError, DimensionError

FULL = "full"
STRUCTURAL_ONLY = "structural"
MODES = (FULL, STRUCTURAL_ONLY)


@dataclass(frozen=True)
class ControlLevelConfig:
    level: int
    channels: int        # C_l, encoder feature width
    control_channels: int  # C'_l, width of the control signal
    height: int
    width: int
    d_cond: int
    fusion_dim: int
    heads: int = 2
    alpha_init: float = -2.0
    temporal_ffn: bool = False
    ffn_dim: int = 64
    temb_dim: int = 0    # width of the timestep embedding feeding the hidden bias, 0 for none


@dataclass
class ControlLevelState:
    h_enc: np.ndarray
    h_ctrl: np.ndarray
    s_proj: np.ndarray | None = None
    s: np.ndarray | None = None
    g: np.ndarray | None = None
    f: np.ndarray | None = None
    z: np.ndarray | None = None
    z_agg: np.ndarray | None = None


def _p(level: int, name: str) -> str:
    return f"ecm.l{level}.{name}"


def init_control_level(store: ParamStore, rng: np.random.Generator, cfg: ControlLevelConfig) -> None:
    l, C, Cc = cfg.level, cfg.channels, cfg.control_channels
    if Cc % cfg.heads:
        raise ConfigurationError(f"control width {Cc} not divisible by heads={cfg.heads}")
    fan1 = C * 27
    store.add(_p(l, "ctrl.w1"), rng.normal(0.0, math.sqrt(2.0 / fan1), (Cc, C, 3, 3, 3)), STRUCTURAL)
    store.add(_p(l, "ctrl.b1"), np.zeros(Cc), STRUCTURAL)
    if cfg.temb_dim:
        E = cfg.temb_dim
        store.add(_p(l, "ctrl.tw"), rng.normal(0.0, 1.0 / math.sqrt(E), (E, Cc)), STRUCTURAL)
        store.add(_p(l, "ctrl.tb"), np.zeros(Cc), STRUCTURAL)
    # zero-initialised output conv: an untrained control block leaves the U-Net untouched
    store.add(_p(l, "ctrl.w2"), np.zeros((Cc, Cc, 3, 3, 3)), STRUCTURAL)
    store.add(_p(l, "ctrl.b2"), np.zeros(Cc), STRUCTURAL)

    st = SEMANTIC_TEMPORAL
    store.add(_p(l, "sem.w1"), rng.normal(0.0, 1.0 / math.sqrt(cfg.d_cond), (cfg.d_cond, cfg.fusion_dim)), st)
    store.add(_p(l, "sem.b1"), np.zeros(cfg.fusion_dim), st)
    store.add(_p(l, "sem.w2"), rng.normal(0.0, 0.1 / math.sqrt(cfg.fusion_dim), (cfg.fusion_dim, Cc)), st)
    store.add(_p(l, "sem.b2"), np.zeros(Cc), st)
    store.add(_p(l, "gate.w"), np.zeros((Cc, Cc)), st)
    store.add(_p(l, "gate.b"), np.zeros(Cc), st)

    store.add(_p(l, "temp.ln_scale"), np.ones(Cc), st)
    store.add(_p(l, "temp.ln_shift"), np.zeros(Cc), st)
    for key in ("wq", "wk", "wv", "wo"):
        store.add(_p(l, f"temp.{key}"), rng.normal(0.0, 1.0 / math.sqrt(Cc), (Cc, Cc)), st)
    if cfg.temporal_ffn:
        store.add(_p(l, "temp.ffn_ln_scale"), np.ones(Cc), st)
        store.add(_p(l, "temp.ffn_ln_shift"), np.zeros(Cc), st)
        store.add(_p(l, "temp.ffn_w1"), rng.normal(0.0, 1.0 / math.sqrt(Cc), (Cc, cfg.ffn_dim)), st)
        store.add(_p(l, "temp.ffn_b1"), np.zeros(cfg.ffn_dim), st)
        store.add(_p(l, "temp.ffn_w2"), np.zeros((cfg.ffn_dim, Cc)), st)
        store.add(_p(l, "temp.ffn_b2"), np.zeros(Cc), st)
    store.add(_p(l, "temp.alpha_raw"), np.full(1, cfg.alpha_init), st)


def structural_path(h_enc, store: ParamStore, level: int, temb=None) -> Var:
    """``temb[B, E]`` is used only when the level has a timestep bias."""
    h_enc = as_var(h_enc)
    w1 = store.var(_p(level, "ctrl.w1"))
    if h_enc.ndim != 5 or h_enc.shape[1] != w1.shape[1]:
        raise DimensionError(
            f"level {level}: encoder features {h_enc.shape} do not match {w1.shape[1]} input channels"
        )
    h = ops.conv3d_apply(h_enc, w1, store.var(_p(level, "ctrl.b1")))
    if temb is not None and _p(level, "ctrl.tw") in store:
        bias = ops.dense_apply(temb, store.var(_p(level, "ctrl.tw")), store.var(_p(level, "ctrl.tb")))
        B, Cc = bias.shape
        if B != h.shape[0]:
            raise DimensionError(f"level {level}: {B} timestep embeddings for a batch of {h.shape[0]}")
        h = ops.add(h, ops.reshape(bias, (B, Cc, 1, 1, 1)))
    h = ops.silu(h)
    return ops.conv3d_apply(h, store.var(_p(level, "ctrl.w2")), store.var(_p(level, "ctrl.b2")))


def semantic_project(m, store: ParamStore, level: int) -> Var:
    m = as_var(m)
    w1 = store.var(_p(level, "sem.w1"))
    if m.shape[-1] != w1.shape[0]:
        raise ConfigurationError(f"semantic vector has {m.shape[-1]} dims, level {level} expects {w1.shape[0]}")
    h = ops.dense_apply(m, w1, store.var(_p(level, "sem.b1")), "silu")
    return ops.dense_apply(h, store.var(_p(level, "sem.w2")), store.var(_p(level, "sem.b2")))


def tile_spatial(s_proj, T: int, H: int, W: int) -> Var:
    """Replicate ``s_proj[..., C]`` to ``[..., C, T, H, W]``."""
    s_proj = as_var(s_proj)
    lead = s_proj.shape
    expanded = ops.reshape(s_proj, lead + (1, 1, 1))
    return ops.broadcast_to(expanded, lead + (T, H, W))


def gated_fuse(h_ctrl, s_proj, s, store: ParamStore, level: int) -> tuple[Var, Var]:
    h_ctrl, s_proj, s = as_var(h_ctrl), as_var(s_proj), as_var(s)
    if h_ctrl.shape != s.shape:
        raise DimensionError(f"structural {h_ctrl.shape} and semantic {s.shape} signals differ")
    _, _, T, H, W = h_ctrl.shape
    logits = ops.dense_apply(s_proj, store.var(_p(level, "gate.w")), store.var(_p(level, "gate.b")))
    g = tile_spatial(ops.sigmoid(logits), T, H, W)
    f = ops.add(h_ctrl, ops.mul(g, ops.sub(s, h_ctrl)))
    return g, f


def psi(x) -> Var:
    """``[B, C, T, H, W] -> [B*H*W, T, C]``: time becomes the sequence axis."""
    x = as_var(x)
    B, C, T, H, W = x.shape
    return ops.reshape(ops.transpose(x, (0, 3, 4, 2, 1)), (B * H * W, T, C))


def psi_inv(x, shape: tuple[int, int, int, int, int]) -> Var:
    B, C, T, H, W = shape
    return ops.transpose(ops.reshape(as_var(x), (B, H, W, T, C)), (0, 4, 3, 1, 2))


def temporal_params(store: ParamStore, level: int) -> dict[str, Var]:
    prefix = _p(level, "temp.")
    keys = ops.ATTENTION_KEYS + (ops.FFN_KEYS if prefix + "ffn_w1" in store else ())
    return {k: store.var(prefix + k) for k in keys}


def mixing_weight(store: ParamStore, level: int) -> Var:
    return ops.sigmoid(store.var(_p(level, "temp.alpha_raw")))


def temporal_refine(f, store: ParamStore, level: int, heads: int, dropout: float = 0.0,
                    rng: np.random.Generator | None = None) -> Var:
    """``dropout`` acts on the refined branch and only when ``rng`` is given."""
    f = as_var(f)
    shape = f.shape
    refined = psi_inv(ops.attention_apply(psi(f), temporal_params(store, level), heads), shape)
    refined = ops.dropout(refined, dropout, rng)
    alpha = mixing_weight(store, level)
    # a * refined + (1 - a) * f  ==  f + a * (refined - f)
    return ops.add(f, ops.mul(alpha, ops.sub(refined, f)))


def aggregate_time(z) -> Var:
    return ops.mean(z, axis=2)


def aggregate_and_inject(z, skip) -> Var:
    z, skip = as_var(z), as_var(skip)
    if z.ndim != 5 or skip.ndim != 4 or z.shape[:2] + z.shape[3:] != skip.shape:
        raise DimensionError(f"control {z.shape} cannot be injected into skip features {skip.shape}")
    return ops.add(skip, aggregate_time(z))


def control_level(h_enc, m, store: ParamStore, level: int, heads: int, mode: str = FULL,
                  keep_state: bool = False, dropout: float = 0.0,
                  rng: np.random.Generator | None = None, temb=None):
    """Run one level of the control module; returns ``z`` (and the state if asked).

    In ``structural`` mode the semantic path is switched off and ``z = h_ctrl``.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown control mode {mode!r}")
    h_enc = as_var(h_enc)
    h_ctrl = structural_path(h_enc, store, level, temb)
    state = ControlLevelState(h_enc=h_enc.value, h_ctrl=h_ctrl.value) if keep_state else None
    if mode == STRUCTURAL_ONLY:
        z = h_ctrl
    else:
        _, _, T, H, W = h_ctrl.shape
        s_proj = semantic_project(m, store, level)
        s = tile_spatial(s_proj, T, H, W)
        g, f = gated_fuse(h_ctrl, s_proj, s, store, level)
        z = temporal_refine(f, store, level, heads, dropout, rng)
        if keep_state:
            state.s_proj, state.s, state.g, state.f = s_proj.value, s.value, g.value, f.value
    if keep_state:
        state.z = z.value
        state.z_agg = z.value.mean(axis=2)
        return z, state
    return z


def level_configs(cfg) -> list[ControlLevelConfig]:
    """Per-level control configuration derived from a :class:`RunConfig`."""
    out = []
    for l, ch in enumerate(cfg.unet_channels):
        size = cfg.image_size // (2 ** l)
        out.append(ControlLevelConfig(
            level=l, channels=ch, control_channels=ch, height=size, width=size,
            d_cond=cfg.d_cond, fusion_dim=cfg.fusion_dim, heads=cfg.heads,
            alpha_init=cfg.alpha_init, temporal_ffn=cfg.temporal_ffn, ffn_dim=cfg.ffn_dim,
            temb_dim=cfg.temb_dim if cfg.control_temb else 0,
        ))
    return out
