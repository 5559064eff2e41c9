"""Temporal adaptation: time-gap tokens, token interleaving, the change-description
prompt, the composite adapter loss, and a small summariser producing the
sequence-level semantic vector that conditions the generator.

All trainable parameters here live in the ``semantic_temporal`` partition.
The frame projection that stands in for a vision tower is frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .core import ops
from .core.params import FROZEN, SEMANTIC_TEMPORAL, ParamStore
from .core.tape import Var, as_var
from .errors import ArityError, ConfigurationError, DomainError

PHI_DIM = 6
YEAR_DAYS = 365.25
MONTH_DAYS = 30.44
DECADE_DAYS = 3650.0

VISUAL = "visual"
TEMPORAL = "temporal"


def phi_featurize(days) -> np.ndarray:
    """Six smooth features of a time gap in days; broadcasts over array input.

    ``[log1p(d), sin/cos of the annual phase, sin/cos of the monthly phase,
    min(d / 3650, 1)]``.
    """
    d = np.asarray(days, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise DomainError("time gap must be finite")
    if np.any(d < 0):
        raise DomainError(f"time gap must be non-negative, got {days}")
    year = 2.0 * math.pi * d / YEAR_DAYS
    month = 2.0 * math.pi * d / MONTH_DAYS
    return np.stack(
        [np.log1p(d), np.sin(year), np.cos(year), np.sin(month), np.cos(month),
         np.minimum(d / DECADE_DAYS, 1.0)],
        axis=-1,
    )


def init_pte(store: ParamStore, rng: np.random.Generator, d_tok: int, d_hidden: int,
             prefix: str = "pte") -> None:
    store.add(f"{prefix}.base_token", rng.normal(0.0, 0.02, d_tok), SEMANTIC_TEMPORAL)
    store.add(f"{prefix}.w1", rng.normal(0.0, 1.0 / math.sqrt(PHI_DIM), (PHI_DIM, d_hidden)),
              SEMANTIC_TEMPORAL)
    store.add(f"{prefix}.b1", np.zeros(d_hidden), SEMANTIC_TEMPORAL)
    store.add(f"{prefix}.w2", rng.normal(0.0, 1.0 / math.sqrt(d_hidden), (d_hidden, d_tok)),
              SEMANTIC_TEMPORAL)
    store.add(f"{prefix}.b2", np.zeros(d_tok), SEMANTIC_TEMPORAL)


def pte_embed(days, store: ParamStore, prefix: str = "pte") -> Var:
    """Time-gap token: ``base_token + MLP(phi(days))``, shape ``days.shape + (d_tok,)``."""
    feats = phi_featurize(days)
    hidden = ops.dense_apply(feats, store.var(f"{prefix}.w1"), store.var(f"{prefix}.b1"), "relu")
    out = ops.dense_apply(hidden, store.var(f"{prefix}.w2"), store.var(f"{prefix}.b2"))
    return ops.add(out, store.var(f"{prefix}.base_token"))


@dataclass
class TokenSequence:
    """Visual and temporal tokens in ``V, t, V, ..., V`` order.

    ``tokens`` has shape ``[..., len(kinds), d_tok]`` so a batch of sequences
    with the same length shares one node.
    """

    kinds: tuple[str, ...]
    tokens: Var

    def __len__(self) -> int:
        return len(self.kinds)

    def item(self, i: int) -> np.ndarray:
        return self.tokens.value[..., i, :]


def interleave_tokens(visuals, deltas, store: ParamStore, prefix: str = "pte") -> TokenSequence:
    """Insert a time-gap token between every pair of consecutive visual tokens.

    ``visuals`` is a list of ``[..., d_tok]`` vectors or a node of shape
    ``[..., n, d_tok]``; ``deltas`` holds the ``n - 1`` gaps in days along its
    last axis.
    """
    if isinstance(visuals, (list, tuple)):
        if not visuals:
            raise ArityError("need at least one visual token")
        visuals = ops.concat([ops.reshape(as_var(v), as_var(v).shape[:-1] + (1, as_var(v).shape[-1]))
                              for v in visuals], axis=-2)
    visuals = as_var(visuals)
    n = visuals.shape[-2]
    deltas = np.atleast_1d(np.asarray(deltas, dtype=np.float64))
    n_gaps = deltas.shape[-1]
    if n < 1 or n_gaps != n - 1:
        raise ArityError(f"{n} visual tokens need {n - 1} gaps, got {n_gaps}")
    if n == 1:
        return TokenSequence((VISUAL,), visuals)
    temporal = pte_embed(deltas, store, prefix)
    joined = ops.concat([visuals, temporal], axis=-2)
    order = []
    kinds = []
    for i in range(n):
        order.append(i)
        kinds.append(VISUAL)
        if i < n - 1:
            order.append(n + i)
            kinds.append(TEMPORAL)
    return TokenSequence(tuple(kinds), ops.take(joined, order, axis=-2))


# -- prompts -----------------------------------------------------------------

_PROMPT_TAIL = (
    " Scene: {scene}. Describe specific changes between these time-series remote sensing "
    "images in a single paragraph. Focus on concrete changes to structures, landscape, or "
    "development with precise location details. "
)


def image_placeholders(n_images: int) -> str:
    # Two images are written back to back; longer runs use a literal "..." separator.
    if n_images > 2:
        return "...".join(["<image>"] * n_images)
    return "<image>" * n_images


def build_ctp_prompt(scene_description: str, n_images: int) -> str:
    """Instruction prompt asking for a change description of ``n_images`` frames."""
    if n_images < 2:
        raise DomainError(f"a change prompt needs at least 2 images, got {n_images}")
    if not scene_description or not scene_description.strip():
        raise DomainError("scene description must be non-empty")
    return image_placeholders(n_images) + _PROMPT_TAIL.format(scene=scene_description)


def prompt_variant(name: str) -> str:
    """Raw prompt template ``short``, ``ours`` or ``verbose`` as shipped with the package."""
    if name not in ("short", "ours", "verbose"):
        raise ConfigurationError(f"unknown prompt variant {name!r}")
    return resources.files("sitsforecast").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


# -- losses ------------------------------------------------------------------

def combine_losses(l_text, l_temp, lambda_text: float, lambda_temp: float) -> Var:
    if lambda_text < 0 or lambda_temp < 0:
        raise ConfigurationError("loss weights must be non-negative")
    l_text, l_temp = as_var(l_text), as_var(l_temp)
    if not (np.all(np.isfinite(l_text.value)) and np.all(np.isfinite(l_temp.value))):
        raise DomainError("loss terms must be finite")
    return ops.add(ops.scale(l_text, lambda_text), ops.scale(l_temp, lambda_temp))


def temporal_smoothness(seq: TokenSequence) -> Var:
    """Mean squared difference between consecutive temporal tokens (0 if fewer than two)."""
    idx = [i for i, k in enumerate(seq.kinds) if k == TEMPORAL]
    if len(idx) < 2:
        return Var(0.0)
    temporal = ops.take(seq.tokens, idx, axis=-2)
    head = ops.take(temporal, list(range(len(idx) - 1)), axis=-2)
    tail = ops.take(temporal, list(range(1, len(idx))), axis=-2)
    return ops.mse(tail, head)


# -- summariser / vision stand-in --------------------------------------------

def init_summarizer(store: ParamStore, rng: np.random.Generator, d_tok: int, d_cond: int,
                    prefix: str = "summary") -> None:
    store.add(f"{prefix}.query", rng.normal(0.0, 1.0 / math.sqrt(d_tok), d_tok), SEMANTIC_TEMPORAL)
    store.add(f"{prefix}.w", rng.normal(0.0, 1.0 / math.sqrt(d_tok), (d_tok, d_cond)), SEMANTIC_TEMPORAL)
    store.add(f"{prefix}.b", np.zeros(d_cond), SEMANTIC_TEMPORAL)


def pool_sequence(seq: TokenSequence, store: ParamStore, prefix: str = "summary") -> Var:
    """Attention-pooled mean of the items, weights ``softmax(item . query / sqrt(d))``."""
    tokens = seq.tokens
    d = tokens.shape[-1]
    q = ops.reshape(store.var(f"{prefix}.query"), (d, 1))
    scores = ops.scale(ops.matmul(tokens, q), 1.0 / math.sqrt(d))
    weights = ops.softmax(scores, axis=-2)
    pooled = ops.matmul(ops.transpose(weights, _swap_last(weights.ndim)), tokens)
    return ops.reshape(pooled, tokens.shape[:-2] + (d,))


def summarize_sequence(seq: TokenSequence, store: ParamStore, horizon=None,
                       prefix: str = "summary", pte_prefix: str = "pte") -> Var:
    """Semantic vector ``[..., d_cond]`` for a token sequence.

    ``horizon`` (days from the last frame to the frame being forecast) is
    embedded with the time-gap encoder and added to the pooled summary, so the
    vector can tell how far ahead it is asked to look.
    """
    if len(seq) == 0:
        raise DomainError("cannot summarise an empty sequence")
    pooled = pool_sequence(seq, store, prefix)
    if horizon is not None:
        pooled = ops.add(pooled, pte_embed(horizon, store, pte_prefix))
    return ops.dense_apply(pooled, store.var(f"{prefix}.w"), store.var(f"{prefix}.b"))


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def init_vision(store: ParamStore, rng: np.random.Generator, frame_dim: int, d_tok: int,
                prefix: str = "vision") -> None:
    # fixed random projection; frozen from the start
    store.add(f"{prefix}.proj", rng.normal(0.0, 1.0 / math.sqrt(frame_dim), (frame_dim, d_tok)), FROZEN)


def visual_features(frames: np.ndarray, store: ParamStore, prefix: str = "vision") -> Var:
    """Project frames ``[..., H, W, C]`` in [0, 1] to tokens ``[..., d_tok]``."""
    frames = np.asarray(frames, dtype=np.float64)
    flat = frames.reshape(frames.shape[:-3] + (-1,)) * 2.0 - 1.0
    return ops.linear(flat, store.var(f"{prefix}.proj"))


def semantic_vector(frames: np.ndarray, timestamps: np.ndarray, horizon, store: ParamStore) -> Var:
    """End-to-end semantic vector for ``frames[..., n, H, W, C]`` taken at ``timestamps[..., n]``."""
    visuals = visual_features(frames, store)
    deltas = np.diff(np.asarray(timestamps, dtype=np.float64), axis=-1)
    seq = interleave_tokens(visuals, deltas, store)
    return summarize_sequence(seq, store, horizon)


def init_temporal_tokens(store: ParamStore, rng: np.random.Generator, *, frame_dim: int,
                         d_tok: int, pte_hidden: int, d_cond: int) -> None:
    init_vision(store, rng, frame_dim, d_tok)
    init_pte(store, rng, d_tok, pte_hidden)
    init_summarizer(store, rng, d_tok, d_cond)


def sequence_kinds(n_visual: int) -> Sequence[str]:
    return tuple(VISUAL if i % 2 == 0 else TEMPORAL for i in range(2 * n_visual - 1))
