"""Randomised finite-difference suites for every backward kernel.

Each suite builds a small model from a random configuration, replaces
zero-initialised parameters with random values (a zero output conv would
hide every upstream gradient) and checks ``sum(R * f(x))`` for a fixed
random ``R``. Derivatives use the five-point stencil with ``h = 1e-4``.
Inputs are registered as parameters so their gradients are checked as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import control, diffusion, temporal_tokens
from .config import RunConfig
from .core import ops
from .core.gradcheck import finite_diff_check
from .core.params import FROZEN, SEMANTIC_TEMPORAL, ParamStore
from .core.tape import Var

Builder = Callable[[np.random.Generator], tuple[ParamStore, Callable[[ParamStore], Var]]]


def _objective(fn: Callable[[ParamStore], Var], shape_rng: np.random.Generator):
    cache: dict = {}

    def f(store: ParamStore) -> Var:
        y = fn(store)
        if "r" not in cache:
            cache["r"] = shape_rng.normal(size=y.shape)
        return ops.sum_all(ops.mul(y, cache["r"]))

    return f


def randomize(store: ParamStore, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Overwrite every all-zero parameter with small random values."""
    for name, entry in store.items():
        if not np.any(entry.value):
            store.set_value(name, rng.normal(0.0, scale, entry.value.shape))


def _input(store: ParamStore, rng, shape, name: str = "x") -> None:
    store.add(name, rng.normal(size=shape), SEMANTIC_TEMPORAL)


# -- numeric core ----------------------------------------------------------------

def build_dense(rng):
    store = ParamStore()
    lead = tuple(int(n) for n in rng.integers(1, 4, size=rng.integers(1, 3)))
    d_in, d_out = (int(n) for n in rng.integers(1, 7, size=2))
    act = str(rng.choice(ops.ACTIVATIONS))
    _input(store, rng, lead + (d_in,))
    store.add("w", rng.normal(size=(d_in, d_out)), SEMANTIC_TEMPORAL)
    store.add("b", rng.normal(size=d_out), SEMANTIC_TEMPORAL)
    return store, _objective(lambda s: ops.dense_apply(s.var("x"), s.var("w"), s.var("b"), act), rng)


def build_conv3d(rng):
    store = ParamStore()
    B, C, Co = (int(n) for n in rng.integers(1, 4, size=3))
    T, H, W = (int(n) for n in rng.integers(1, 5, size=3))
    _input(store, rng, (B, C, T, H, W))
    store.add("k", rng.normal(0.0, 0.5, (Co, C, 3, 3, 3)), SEMANTIC_TEMPORAL)
    store.add("b", rng.normal(size=Co), SEMANTIC_TEMPORAL)
    return store, _objective(lambda s: ops.conv3d_apply(s.var("x"), s.var("k"), s.var("b")), rng)


def build_attention(rng):
    store = ParamStore()
    heads = int(rng.integers(1, 4))
    lo = -(-4 // heads)  # layernorm over fewer than 4 features is too curved for the stencil
    d = heads * int(rng.integers(lo, lo + 2))
    S, L = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    ffn = bool(rng.integers(2))
    _input(store, rng, (S, L, d))
    store.add("ln_scale", 1.0 + 0.1 * rng.normal(size=d), SEMANTIC_TEMPORAL)
    store.add("ln_shift", 0.1 * rng.normal(size=d), SEMANTIC_TEMPORAL)
    for k in ("wq", "wk", "wv", "wo"):
        store.add(k, rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)), SEMANTIC_TEMPORAL)
    keys = ops.ATTENTION_KEYS
    if ffn:
        hid = int(rng.integers(2, 9))
        store.add("ffn_ln_scale", 1.0 + 0.1 * rng.normal(size=d), SEMANTIC_TEMPORAL)
        store.add("ffn_ln_shift", 0.1 * rng.normal(size=d), SEMANTIC_TEMPORAL)
        store.add("ffn_w1", rng.normal(0.0, 0.5, (d, hid)), SEMANTIC_TEMPORAL)
        store.add("ffn_b1", rng.normal(0.0, 0.1, hid), SEMANTIC_TEMPORAL)
        store.add("ffn_w2", rng.normal(0.0, 0.5, (hid, d)), SEMANTIC_TEMPORAL)
        store.add("ffn_b2", rng.normal(0.0, 0.1, d), SEMANTIC_TEMPORAL)
        keys = keys + ops.FFN_KEYS

    def fn(s):
        return ops.attention_apply(s.var("x"), {k: s.var(k) for k in keys}, heads)

    return store, _objective(fn, rng)


# -- temporal tokens ---------------------------------------------------------------

def build_pte(rng):
    store = ParamStore()
    d_tok, hid = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    temporal_tokens.init_pte(store, rng, d_tok, hid)
    randomize(store, rng)
    days = rng.uniform(0.0, 4000.0, size=tuple(int(n) for n in rng.integers(1, 4, size=rng.integers(1, 3))))
    return store, _objective(lambda s: temporal_tokens.pte_embed(days, s), rng)


def build_semproc(rng):
    """Interleaving, attention pooling and the horizon-aware summary projection."""
    store = ParamStore()
    B, n = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    d_tok, d_cond, hid = (int(v) for v in rng.integers(2, 8, size=3))
    temporal_tokens.init_pte(store, rng, d_tok, hid)
    temporal_tokens.init_summarizer(store, rng, d_tok, d_cond)
    randomize(store, rng)
    _input(store, rng, (B, n, d_tok), "visuals")
    stamps = np.cumsum(rng.uniform(5.0, 900.0, size=(B, n)), axis=-1)
    horizon = rng.uniform(5.0, 900.0, size=B)

    def fn(s):
        seq = temporal_tokens.interleave_tokens(s.var("visuals"), np.diff(stamps, axis=-1), s)
        return temporal_tokens.summarize_sequence(seq, s, horizon)

    return store, _objective(fn, rng)


# -- control injection -------------------------------------------------------------

def _control_setup(rng, *, ffn: bool | None = None):
    heads = int(rng.integers(1, 3))
    C = int(rng.integers(1, 3))
    Cc = heads * int(rng.integers(4 // heads, 4 // heads + 2))
    B, T, H, W = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    d_cond, fusion = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    if ffn is None:
        ffn = bool(rng.integers(2))
    lc = control.ControlLevelConfig(
        level=0, channels=C, control_channels=Cc, height=H, width=W, d_cond=d_cond,
        fusion_dim=fusion, heads=heads, alpha_init=float(rng.normal(-1.0, 1.0)),
        temporal_ffn=ffn, ffn_dim=int(rng.integers(2, 6)), temb_dim=int(rng.integers(0, 4)),
    )
    store = ParamStore()
    control.init_control_level(store, rng, lc)
    randomize(store, rng)
    return store, lc, (B, T, H, W)


def build_gate(rng):
    store, lc, (B, T, H, W) = _control_setup(rng)
    Cc = lc.control_channels
    _input(store, rng, (B, Cc, T, H, W), "h_ctrl")
    _input(store, rng, (B, Cc), "s_proj")

    def fn(s):
        s_proj = s.var("s_proj")
        tiled = control.tile_spatial(s_proj, T, H, W)
        _, f = control.gated_fuse(s.var("h_ctrl"), s_proj, tiled, s, 0)
        return f

    return store, _objective(fn, rng)


def build_temporal_refine(rng):
    store, lc, (B, T, H, W) = _control_setup(rng)
    _input(store, rng, (B, lc.control_channels, T, H, W), "f")
    return store, _objective(lambda s: control.temporal_refine(s.var("f"), s, 0, lc.heads), rng)


def build_sfci_level(rng):
    store, lc, (B, T, H, W) = _control_setup(rng)
    _input(store, rng, (B, lc.channels, T, H, W), "h_enc")
    _input(store, rng, (B, lc.d_cond), "m")
    skip = rng.normal(size=(B, lc.control_channels, H, W))
    if lc.temb_dim:
        _input(store, rng, (B, lc.temb_dim), "temb")

    def fn(s):
        temb = s.var("temb") if lc.temb_dim else None
        z = control.control_level(s.var("h_enc"), s.var("m"), s, 0, lc.heads, temb=temb)
        return control.aggregate_and_inject(z, skip)

    return store, _objective(fn, rng)


# -- diffusion ---------------------------------------------------------------------

def build_diffusion(rng):
    """Full conditioned noise prediction of a tiny model, every parameter group included."""
    heads = int(rng.integers(1, 3))
    ch = tuple(heads * int(c) for c in rng.integers(4 // heads, 4 // heads + 2, size=2))
    cfg = RunConfig(image_size=4, channels=int(rng.integers(1, 4)), input_length=int(rng.integers(2, 4)),
                    unet_channels=ch, temb_dim=4, d_tok=4, pte_hidden=3, d_cond=4, fusion_dim=3,
                    heads=heads, diffusion_steps=10)
    store = diffusion.init_model(cfg, seed=int(rng.integers(1 << 30)))
    randomize(store, rng)
    B, T = int(rng.integers(1, 3)), cfg.input_length
    frames = rng.uniform(0.0, 1.0, size=(B, T, 4, 4, cfg.channels))
    stamps = np.cumsum(rng.uniform(5.0, 500.0, size=(B, T)), axis=-1)
    cond = diffusion.Conditioning(frames, stamps, rng.uniform(5.0, 500.0, size=B))
    t = rng.integers(0, cfg.diffusion_steps, size=B)
    x_t = rng.normal(size=(B, cfg.channels, 4, 4))
    mode = str(rng.choice(control.MODES))

    def fn(s):
        return diffusion.predict_noise(x_t, t, s, cfg, cond, mode=mode)

    return store, _objective(fn, rng)


SUITES: dict[str, tuple[str, Builder]] = {
    "dense": ("numeric_core", build_dense),
    "conv3d": ("numeric_core", build_conv3d),
    "attention": ("numeric_core", build_attention),
    "pte": ("tam", build_pte),
    "semproc": ("tam", build_semproc),
    "gate": ("sfci", build_gate),
    "temporal_refine": ("sfci", build_temporal_refine),
    "sfci_level": ("sfci", build_sfci_level),
    "diffusion": ("diffusion", build_diffusion),
}


@dataclass
class SuiteResult:
    configs: int
    max_rel_error: float
    worst_param: str | None
    worst_config: int | None
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-5


# derivatives below ~1e-5 |f| sit under the rounding noise of a difference at h = 1e-4
FLOOR_SCALE = 1e-5


def run_suite(name: str, seed: int = 0, configs: int = 20, samples: int = 4) -> SuiteResult:
    _, build = SUITES[name]
    worst = SuiteResult(configs, 0.0, None, None, 0)
    for i in range(configs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, sum(map(ord, name))]))
        store, f = build(rng)
        names = [n for n in store if store.partition_of(n) != FROZEN or name == "diffusion"]
        rep = finite_diff_check(f, store, h=1e-4, samples=samples, names=names, rng=rng,
                                floor_scale=FLOOR_SCALE, order=4)
        worst.n_checked += rep.n_checked
        if worst.worst_param is None or rep.max_rel_error > worst.max_rel_error:
            worst.max_rel_error, worst.worst_param, worst.worst_config = rep.max_rel_error, rep.worst_param, i
    return worst


def run_suites(names, seed: int = 0, configs: int = 20) -> dict[str, SuiteResult]:
    return {n: run_suite(n, seed, configs) for n in names}
