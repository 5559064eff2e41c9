"""Change masks, the temporal consistency score and reference PSNR / SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError

LUMA = np.array([0.2989, 0.5870, 0.1140])
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True, eq=False)
class ChangeMask:
    """Binary ``height x width`` change map."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise DimensionError(f"mask must be a non-empty 2-D array, got shape {bits.shape}")
        if bits.dtype != bool:
            if not np.all((bits == 0) | (bits == 1)):
                raise DomainError("mask values must be 0 or 1")
            bits = bits.astype(bool)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True)
class TcsConfig:
    sigma: float = 0.2
    beta: float = 1.0
    epsilon: float = 1e-8
    # "agree": two empty masks agree perfectly, one empty mask gives SPS = 0.
    # "strict": any empty mask gives SPS = 0.
    empty_policy: str = "agree"

    def __post_init__(self) -> None:
        if not self.sigma > 0 or self.beta < 0 or not self.epsilon > 0:
            raise ConfigurationError("need sigma > 0, beta >= 0, epsilon > 0")
        if self.empty_policy not in ("agree", "strict"):
            raise ConfigurationError(f"unknown empty-mask policy {self.empty_policy!r}")


@dataclass(frozen=True)
class DetectorConfig:
    method: str = "abs_diff_otsu"
    tau: float = 0.25
    morphology: bool = False

    def __post_init__(self) -> None:
        if self.method not in ("abs_diff_otsu", "abs_diff_fixed", "external_mask_file"):
            raise ConfigurationError(f"unknown detector {self.method!r}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("fixed threshold must lie in (0, 1)")


def _check_pair(a: ChangeMask, b: ChangeMask) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")


# -- change detection --------------------------------------------------------

def grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    if img.shape[-1] != 3:
        raise DimensionError(f"expected 1 or 3 channels, got {img.shape[-1]}")
    return img @ LUMA


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximising between-class variance on a ``bins``-bin histogram.

    Values at or above the returned threshold form the foreground. A
    constant input returns its value, i.e. everything is foreground.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def majority_filter(bits: np.ndarray) -> np.ndarray:
    """3x3 majority vote with zero padding (a pixel stays set iff >= 5 of 9 are set)."""
    b = np.asarray(bits, dtype=np.int64)
    p = np.pad(b, 1)
    h, w = b.shape
    count = sum(p[i:i + h, j:j + w] for i in range(3) for j in range(3))
    return count >= 5


def detect_changes(img_a: np.ndarray, img_b: np.ndarray, cfg: DetectorConfig | None = None) -> ChangeMask:
    """Threshold the grayscale absolute difference of two frames in [0, 1]."""
    cfg = cfg or DetectorConfig()
    img_a, img_b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise DimensionError(f"frame shapes differ: {img_a.shape} vs {img_b.shape}")
    if cfg.method == "external_mask_file":
        raise ConfigurationError("external masks are loaded with load_mask(), not computed")
    diff = np.abs(grayscale(img_a) - grayscale(img_b))
    if cfg.method == "abs_diff_fixed":
        bits = diff > cfg.tau
    elif diff.max() <= 0.0:
        bits = np.zeros(diff.shape, dtype=bool)
    else:
        bits = diff >= otsu_threshold(diff)
    if cfg.morphology:
        bits = majority_filter(bits)
    return ChangeMask(bits)


def load_mask(path: str | Path) -> ChangeMask:
    from .sits_io import read_pbm

    return ChangeMask(read_pbm(path))


# -- consistency score -------------------------------------------------------

def centroid(mask: ChangeMask) -> tuple[float, float] | None:
    """Normalised ``(x, y)`` centroid of set pixels using pixel centres; ``None`` if empty."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        return None
    return float((xs.mean() + 0.5) / mask.width), float((ys.mean() + 0.5) / mask.height)


def sps(m_hist: ChangeMask, m_pred: ChangeMask, cfg: TcsConfig | None = None) -> float:
    """Spatial proximity ``exp(-||c_pred - c_hist|| / sigma)`` of the change centroids."""
    cfg = cfg or TcsConfig()
    _check_pair(m_hist, m_pred)
    ch, cp = centroid(m_hist), centroid(m_pred)
    if ch is None or cp is None:
        if ch is None and cp is None and cfg.empty_policy == "agree":
            return 1.0
        return 0.0
    dist = math.hypot(cp[0] - ch[0], cp[1] - ch[1])
    return math.exp(-dist / cfg.sigma)


def acs(m_hist: ChangeMask, m_pred: ChangeMask, cfg: TcsConfig | None = None) -> float:
    """Area consistency ``exp(-beta |A_pred - A_hist| / (max(A_pred, A_hist) + eps))``."""
    cfg = cfg or TcsConfig()
    _check_pair(m_hist, m_pred)
    a_h, a_p = m_hist.area(), m_pred.area()
    return math.exp(-cfg.beta * abs(a_p - a_h) / (max(a_p, a_h) + cfg.epsilon))


def tcs(m_hist: ChangeMask, m_pred: ChangeMask, cfg: TcsConfig | None = None) -> float:
    return sps(m_hist, m_pred, cfg) * acs(m_hist, m_pred, cfg)


def tcs_components(m_hist: ChangeMask, m_pred: ChangeMask, cfg: TcsConfig | None = None) -> dict[str, float]:
    s, a = sps(m_hist, m_pred, cfg), acs(m_hist, m_pred, cfg)
    return {"tcs": s * a, "sps": s, "acs": a}


# -- image quality -----------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; ``inf`` for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_map(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    pa = np.lib.stride_tricks.sliding_window_view(a, (k, k))
    pb = np.lib.stride_tricks.sliding_window_view(b, (k, k))

    def filt(p):
        return np.einsum("ijkl,kl->ij", p, win)

    mu_a, mu_b = filt(pa), filt(pb)
    var_a = filt(pa * pa) - mu_a ** 2
    var_b = filt(pb * pb) - mu_b ** 2
    cov = filt(pa * pb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian (sigma 1.5) windows.

    Multichannel ``H x W x C`` inputs are scored per channel and averaged.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DimensionError(f"expected H x W or H x W x C, got {a.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise DomainError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    win = gaussian_window()
    if a.ndim == 2:
        return float(_ssim_map(a, b, win).mean())
    return float(np.mean([_ssim_map(a[..., c], b[..., c], win).mean() for c in range(a.shape[2])]))
