"""Gather/scatter kernels behind the convolution ops.

Two interchangeable backends are provided: numba-compiled loops and a
pure-numpy path built from strided slice copies. Both visit the kernel
offsets in the same order, so their results are bit-identical. The numpy
path is selected when ``SITSFORECAST_NO_NUMBA`` is set to a truthy value
or when numba cannot be imported.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("SITSFORECAST_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None


def im2col_numpy(x: np.ndarray, kt: int, kh: int, kw: int) -> np.ndarray:
    """Unfold ``x[B,C,T,H,W]`` into ``cols[B,C,kt,kh,kw,T,H,W]`` with zero padding."""
    B, C, T, H, W = x.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kt, kh, kw, T, H, W))
    for a in range(kt):
        for p in range(kh):
            for q in range(kw):
                cols[:, :, a, p, q] = xp[:, :, a:a + T, p:p + H, q:q + W]
    return cols


def col2im_numpy(dcols: np.ndarray, T: int, H: int, W: int) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add columns back onto the input grid."""
    B, C, kt, kh, kw = dcols.shape[:5]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    dxp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw))
    for a in range(kt):
        for p in range(kh):
            for q in range(kw):
                dxp[:, :, a:a + T, p:p + H, q:q + W] += dcols[:, :, a, p, q]
    return np.ascontiguousarray(dxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W])


def _im2col_loops(x, kt, kh, kw):
    B, C, T, H, W = x.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    cols = np.zeros((B, C, kt, kh, kw, T, H, W))
    for n in range(B):
        for c in range(C):
            for a in range(kt):
                for p in range(kh):
                    for q in range(kw):
                        j0 = max(0, pw - q)
                        j1 = min(W, W + pw - q)
                        for t in range(T):
                            ti = t + a - pt
                            if ti < 0 or ti >= T:
                                continue
                            for i in range(H):
                                ii = i + p - ph
                                if ii < 0 or ii >= H:
                                    continue
                                for j in range(j0, j1):
                                    cols[n, c, a, p, q, t, i, j] = x[n, c, ti, ii, j + q - pw]
    return cols


def _col2im_loops(dcols, T, H, W):
    B, C, kt, kh, kw = dcols.shape[:5]
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    dx = np.zeros((B, C, T, H, W))
    for n in range(B):
        for c in range(C):
            for a in range(kt):
                for p in range(kh):
                    for q in range(kw):
                        j0 = max(0, pw - q)
                        j1 = min(W, W + pw - q)
                        for t in range(T):
                            ti = t + a - pt
                            if ti < 0 or ti >= T:
                                continue
                            for i in range(H):
                                ii = i + p - ph
                                if ii < 0 or ii >= H:
                                    continue
                                for j in range(j0, j1):
                                    dx[n, c, ti, ii, j + q - pw] += dcols[n, c, a, p, q, t, i, j]
    return dx


if njit is not None:
    im2col_numba = njit(cache=True)(_im2col_loops)
    col2im_numba = njit(cache=True)(_col2im_loops)
else:  # pragma: no cover
    im2col_numba = None
    col2im_numba = None

USE_NUMBA = im2col_numba is not None and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def im2col(x: np.ndarray, kt: int, kh: int, kw: int) -> np.ndarray:
    if USE_NUMBA:
        return im2col_numba(np.ascontiguousarray(x), kt, kh, kw)
    return im2col_numpy(x, kt, kh, kw)


def col2im(dcols: np.ndarray, T: int, H: int, W: int) -> np.ndarray:
    if USE_NUMBA:
        return col2im_numba(np.ascontiguousarray(dcols), T, H, W)
    return col2im_numpy(dcols, T, H, W)
