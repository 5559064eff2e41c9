"""Run configuration: a flat ``key = value`` file validated against a registry."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError

DETECTORS = ("abs_diff_otsu", "abs_diff_fixed", "external_mask_file")
EMPTY_MASK_POLICIES = ("agree", "strict")


@dataclass(frozen=True)
class RunConfig:
    # data
    image_size: int = 16
    channels: int = 3
    input_length: int = 3
    prediction_length: int = 1
    # architecture
    unet_channels: tuple[int, ...] = (16, 32)
    temb_dim: int = 32
    d_tok: int = 32
    pte_hidden: int = 32
    d_cond: int = 64
    fusion_dim: int = 32
    heads: int = 2
    dropout: float = 0.0
    temporal_ffn: bool = False
    ffn_dim: int = 64
    alpha_init: float = -2.0
    # the control branch also sees the noisy input's skip features and the timestep
    control_sees_xt: bool = True
    control_temb: bool = True
    # diffusion
    diffusion_steps: int = 100
    # optimisation
    batch_size: int = 8
    lr: float = 1e-3
    lr_stage0: float = 2e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    steps_stage0: int = 1000
    steps_stage1: int = 2000
    steps_stage2: int = 1000
    steps_stage3: int = 500
    lambda_text: float = 1.0
    lambda_temp: float = 0.0
    # accepted for parity with the full-size recipe; has no effect here
    contrastive_weight: float = 0.0
    # evaluation
    tcs_sigma: float = 0.2
    tcs_beta: float = 1.0
    tcs_epsilon: float = 1e-8
    empty_mask_policy: str = "agree"
    detector: str = "abs_diff_otsu"
    detector_tau: float = 0.25
    morphology: bool = False

    def __post_init__(self) -> None:
        positive_ints = (
            "image_size", "channels", "input_length", "prediction_length", "temb_dim",
            "d_tok", "pte_hidden", "d_cond", "fusion_dim", "heads", "ffn_dim", "batch_size",
        )
        for key in positive_ints:
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1")
        if self.diffusion_steps < 2:
            raise ConfigurationError("diffusion_steps must be >= 2")
        if self.prediction_length != 1:
            raise ConfigurationError("only one-step forecasting (prediction_length=1) is supported")
        if not self.unet_channels or any(c < 1 for c in self.unet_channels):
            raise ConfigurationError("unet_channels must be a non-empty list of positive ints")
        if self.image_size % (2 ** (len(self.unet_channels) - 1)):
            raise ConfigurationError("image_size must be divisible by 2**(levels-1)")
        for c in self.unet_channels:
            if c % self.heads:
                raise ConfigurationError(f"U-Net width {c} is not divisible by heads={self.heads}")
        for key in ("steps_stage0", "steps_stage1", "steps_stage2", "steps_stage3"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"{key} must be >= 0")
        for key in ("lr", "lr_stage0"):
            if not getattr(self, key) > 0:
                raise ConfigurationError(f"{key} must be > 0")
        if self.lr_min < 0 or self.weight_decay < 0 or self.max_grad_norm < 0:
            raise ConfigurationError("lr_min, weight_decay and max_grad_norm must be >= 0")
        if self.lambda_text < 0 or self.lambda_temp < 0 or self.contrastive_weight < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if not self.tcs_sigma > 0 or self.tcs_beta < 0 or not self.tcs_epsilon > 0:
            raise ConfigurationError("need tcs_sigma > 0, tcs_beta >= 0, tcs_epsilon > 0")
        if self.empty_mask_policy not in EMPTY_MASK_POLICIES:
            raise ConfigurationError(f"empty_mask_policy must be one of {EMPTY_MASK_POLICIES}")
        if self.detector not in DETECTORS:
            raise ConfigurationError(f"detector must be one of {DETECTORS}")
        if not 0.0 < self.detector_tau < 1.0:
            raise ConfigurationError("detector_tau must lie in (0, 1)")

    @property
    def levels(self) -> int:
        return len(self.unet_channels)

    @classmethod
    def paper_scale(cls, **overrides) -> "RunConfig":
        """Dimensions and optimiser settings of the full-size recipe."""
        base = dict(
            batch_size=12, heads=8, dropout=0.1, d_tok=1280, d_cond=512, fusion_dim=1024,
            ffn_dim=2048, lr=2e-5, contrastive_weight=0.1, unet_channels=(320, 640),
        )
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- serialisation ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        registry = {f.name: f for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in registry:
                raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse_value(registry[key], value)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(field: dataclasses.Field, text: str):
    default = field.default
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigurationError(f"bad value {text!r} for {field.name}") from None
