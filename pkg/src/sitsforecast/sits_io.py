"""Image time series: synthetic generation, PPM/PBM codecs, manifests and reports."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError

SCENARIOS = ("growing_square", "moving_block", "seasonal_field", "static")
SCENE_DESCRIPTIONS = {
    "growing_square": "construction site",
    "moving_block": "harbor",
    "seasonal_field": "farmland",
    "static": "desert",
}


@dataclass
class SitsSequence:
    frames: list[np.ndarray]
    timestamps: list[int]
    scene_description: str = ""
    id: str = ""
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.frames = [np.asarray(f, dtype=np.float64) for f in self.frames]
        self.timestamps = [int(t) for t in self.timestamps]
        self.validate()

    def validate(self) -> None:
        if len(self.frames) != len(self.timestamps):
            raise ValidationError(
                f"{self.id or 'sequence'}: {len(self.frames)} frames but {len(self.timestamps)} timestamps"
            )
        if len(self.frames) < 2:
            raise ValidationError(f"{self.id or 'sequence'}: need at least 2 frames, got {len(self.frames)}")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValidationError(f"{self.id or 'sequence'}: timestamps must be strictly increasing")
        shape = self.frames[0].shape
        if len(shape) != 3:
            raise ValidationError(f"{self.id or 'sequence'}: frames must be H x W x C, got {shape}")
        for k, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValidationError(f"{self.id or 'sequence'}: frame {k} has shape {f.shape}, expected {shape}")
            if not np.all(np.isfinite(f)) or f.min() < 0.0 or f.max() > 1.0:
                raise ValidationError(f"{self.id or 'sequence'}: frame {k} has values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape

    def stack(self) -> np.ndarray:
        return np.stack(self.frames)

    def split(self, input_length: int) -> tuple["SitsSequence", np.ndarray | None, int | None]:
        """History of ``input_length`` frames plus the following frame and its timestamp, if any."""
        hist = SitsSequence(self.frames[:input_length], self.timestamps[:input_length],
                            self.scene_description, self.id, dict(self.meta))
        if len(self) > input_length:
            return hist, self.frames[input_length], self.timestamps[input_length]
        return hist, None, None


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    kind: str = "growing_square"
    rate: tuple[float, float] = (0.001, 0.0025)       # side growth, px/day
    velocity: tuple[float, float] = (0.001, 0.002)    # block speed, px/day
    seasonal_amplitude: float = 0.15
    noise: float = 0.02
    gap_days: tuple[float, float] = (30.0, 1100.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if not 0 <= self.rate[0] <= self.rate[1]:
            raise ConfigurationError("rate range must satisfy 0 <= lo <= hi")
        if not 0 <= self.velocity[0] <= self.velocity[1]:
            raise ConfigurationError("velocity range must satisfy 0 <= lo <= hi")
        if not 0 <= self.noise < 0.5:
            raise ConfigurationError("noise amplitude must lie in [0, 0.5)")
        if not 0 <= self.seasonal_amplitude <= 0.3:
            raise ConfigurationError("seasonal amplitude must lie in [0, 0.3]")
        if not 1 <= self.gap_days[0] <= self.gap_days[1]:
            raise ConfigurationError("gap range must satisfy 1 <= lo <= hi")


def interval_coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Length of ``[lo, hi]`` falling inside each unit pixel ``[i, i+1]``, i < n."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def square_coverage(cy: float, cx: float, side: float, size: int) -> np.ndarray:
    """Fraction of every pixel covered by an axis-aligned square."""
    half = side / 2.0
    return np.outer(interval_coverage(cy - half, cy + half, size),
                    interval_coverage(cx - half, cx + half, size))


def _background(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, 2)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += 0.04 * np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    tint = rng.uniform(-0.04, 0.04, channels)
    return np.clip(0.35 + field_[..., None] + tint, 0.0, 1.0)


def _gaps(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    return np.maximum(1, np.round(np.exp(rng.uniform(math.log(lo), math.log(hi), n)))).astype(np.int64)


def _one_sequence(sc: Scenario, rng: np.random.Generator, n_frames: int, size: int,
                  channels: int, index: int) -> SitsSequence:
    t0 = int(rng.integers(0, 3650))
    timestamps = np.concatenate([[t0], t0 + np.cumsum(_gaps(rng, n_frames - 1, *sc.gap_days))])
    elapsed = (timestamps - t0).astype(np.float64)
    bg = _background(rng, size, channels)
    clean = []
    meta: dict[str, Any] = {"scenario": sc.kind}
    if sc.kind == "growing_square":
        rate = rng.uniform(*sc.rate)
        side0 = rng.uniform(2.0, 4.0)
        sides = np.minimum(side0 + rate * elapsed, size - 2.0)
        half = sides.max() / 2.0
        cy, cx = rng.uniform(half + 0.5, size - half - 0.5, 2)
        colour = rng.uniform(0.8, 0.95, channels)
        for s in sides:
            cov = square_coverage(cy, cx, s, size)[..., None]
            clean.append(bg * (1.0 - cov) + colour * cov)
        meta.update(rate=float(rate), sides=[float(s) for s in sides], center=[float(cy), float(cx)])
    elif sc.kind == "moving_block":
        side = 4.0
        speed = rng.uniform(*sc.velocity)
        angle = rng.uniform(0, 2 * math.pi)
        vy, vx = speed * math.sin(angle), speed * math.cos(angle)
        span_y, span_x = vy * elapsed[-1], vx * elapsed[-1]
        lo, hi = side / 2 + 0.5, size - side / 2 - 0.5
        # keep the whole trajectory inside the frame
        span_y = float(np.clip(span_y, -(hi - lo), hi - lo))
        span_x = float(np.clip(span_x, -(hi - lo), hi - lo))
        cy0 = rng.uniform(lo - min(span_y, 0), hi - max(span_y, 0))
        cx0 = rng.uniform(lo - min(span_x, 0), hi - max(span_x, 0))
        frac = elapsed / max(elapsed[-1], 1.0)
        colour = rng.uniform(0.8, 0.95, channels)
        centers = []
        for fr in frac:
            cy, cx = cy0 + span_y * fr, cx0 + span_x * fr
            centers.append([float(cy), float(cx)])
            cov = square_coverage(cy, cx, side, size)[..., None]
            clean.append(bg * (1.0 - cov) + colour * cov)
        meta.update(centers=centers)
    elif sc.kind == "seasonal_field":
        phase = rng.uniform(0, 2 * math.pi)
        for t in timestamps:
            offset = sc.seasonal_amplitude * math.sin(2 * math.pi * t / 365.25 + phase)
            clean.append(np.clip(bg + offset, 0.0, 1.0))
        meta.update(phase=float(phase))
    else:
        clean = [bg.copy() for _ in timestamps]
    frames = []
    for c in clean:
        noise = rng.uniform(-sc.noise / 2, sc.noise / 2, c.shape) if sc.noise else 0.0
        frames.append(np.clip(c + noise, 0.0, 1.0))
    meta["clean"] = clean
    return SitsSequence(frames, timestamps.tolist(), SCENE_DESCRIPTIONS[sc.kind],
                        f"{sc.kind}_{index:04d}", meta)


def generate_synthetic(scenario: Scenario, n_sequences: int, frames_per_seq: int = 4,
                       size: int = 16, seed: int = 0, channels: int = 3) -> list[SitsSequence]:
    """Deterministic synthetic sequences with irregular, log-uniform time gaps.

    Every sequence draws from its own stream ``SeedSequence([seed, scenario.seed, i])``.
    ``meta["clean"]`` holds the noise-free frames.
    """
    if frames_per_seq < 2:
        raise ConfigurationError("frames_per_seq must be >= 2")
    if n_sequences < 0 or size < 4:
        raise ConfigurationError("need n_sequences >= 0 and size >= 4")
    out = []
    for i in range(n_sequences):
        rng = np.random.default_rng(np.random.SeedSequence([seed, scenario.seed, i]))
        out.append(_one_sequence(scenario, rng, frames_per_seq, size, channels, i))
    return out


# -- PPM / PBM -----------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(data: bytes, n_fields: int) -> tuple[list[bytes], int]:
    pos = 0
    out = []
    for _ in range(n_fields):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ValidationError("truncated PNM header")
        out.append(m.group(1))
        pos = m.end()
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(frame: np.ndarray) -> bytes:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValidationError(f"PPM needs an H x W x 3 frame, got {frame.shape}")
    h, w, _ = frame.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(frame).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    fields_, start = _read_header(data, 4)
    if fields_[0] != b"P6":
        raise ValidationError(f"not a binary PPM (magic {fields_[0]!r})")
    w, h, maxval = (int(x) for x in fields_[1:])
    if maxval != 255:
        raise ValidationError(f"only 8-bit PPM is supported (maxval {maxval})")
    raster = data[start:start + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValidationError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(frame))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_pbm(bits: np.ndarray) -> bytes:
    bits = np.asarray(bits).astype(bool)
    if bits.ndim != 2:
        raise ValidationError(f"PBM needs a 2-D mask, got {bits.shape}")
    h, w = bits.shape
    return f"P4\n{w} {h}\n".encode("ascii") + np.packbits(bits, axis=1).tobytes()


def decode_pbm(data: bytes) -> np.ndarray:
    fields_, start = _read_header(data, 3)
    if fields_[0] != b"P4":
        raise ValidationError(f"not a binary PBM (magic {fields_[0]!r})")
    w, h = int(fields_[1]), int(fields_[2])
    row = (w + 7) // 8
    raster = data[start:start + row * h]
    if len(raster) != row * h:
        raise ValidationError("truncated PBM raster")
    packed = np.frombuffer(raster, dtype=np.uint8).reshape(h, row)
    return np.unpackbits(packed, axis=1)[:, :w].astype(bool)


def write_pbm(path: str | Path, bits: np.ndarray) -> None:
    Path(path).write_bytes(encode_pbm(bits))


def read_pbm(path: str | Path) -> np.ndarray:
    return decode_pbm(Path(path).read_bytes())


# -- manifests -----------------------------------------------------------------

def write_sequence(seq: SitsSequence, out_dir: str | Path) -> Path:
    """Write frames as ``<id>_<k>.ppm`` plus the ``<id>.json`` manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (frame, ts) in enumerate(zip(seq.frames, seq.timestamps)):
        name = f"{seq.id}_{k}.ppm"
        write_ppm(out_dir / name, frame)
        entries.append({"path": name, "timestamp_days": int(ts)})
    manifest = {"id": seq.id, "scene_description": seq.scene_description, "frames": entries}
    path = out_dir / f"{seq.id}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_sequence(manifest: str | Path) -> SitsSequence:
    manifest = Path(manifest)
    try:
        doc = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest}: invalid JSON ({exc})") from None
    for key in ("id", "scene_description", "frames"):
        if key not in doc:
            raise ValidationError(f"{manifest}: missing key {key!r}")
    frames, stamps = [], []
    for entry in doc["frames"]:
        path = manifest.parent / entry["path"]
        if not path.is_file():
            raise FileNotFoundError(f"{manifest}: frame file {path} does not exist")
        frames.append(read_ppm(path))
        ts = entry["timestamp_days"]
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise ValidationError(f"{manifest}: timestamp_days must be an integer, got {ts!r}")
        stamps.append(ts)
    return SitsSequence(frames, stamps, doc["scene_description"], doc["id"])


def load_dataset(directory: str | Path) -> list[SitsSequence]:
    """Every ``*.json`` manifest in ``directory``, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    return [load_sequence(p) for p in sorted(directory.glob("*.json"))]


# -- reports -------------------------------------------------------------------

def _round_floats(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


SEQUENCE_FIELDS = ("id", "tcs", "sps", "acs", "psnr", "ssim")


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return sum(vals) / len(vals) if vals else None


def build_report(results: Sequence[dict], header: dict | None = None) -> dict:
    doc: dict[str, Any] = dict(header or {})
    doc.setdefault("config", {})
    seqs = [{k: r.get(k) for k in SEQUENCE_FIELDS} for r in results]
    doc["sequences"] = seqs
    if not seqs:
        doc["aggregate"] = None
    else:
        doc["aggregate"] = {
            "mean_tcs": _mean(r["tcs"] for r in seqs),
            "mean_psnr": _mean(r["psnr"] for r in seqs),
            "mean_ssim": _mean(r["ssim"] for r in seqs),
        }
    return _round_floats(doc)


def dumps_json(doc: dict) -> str:
    return json.dumps(_round_floats(doc), indent=2, allow_nan=False) + "\n"


def write_report(results: Sequence[dict], path: str | Path, header: dict | None = None) -> dict:
    """Write the evaluation report JSON (9 significant digits, schema key order)."""
    doc = build_report(results, header)
    Path(path).write_text(dumps_json(doc), encoding="utf-8")
    return doc
