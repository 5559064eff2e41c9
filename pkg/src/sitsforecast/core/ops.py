"""Differentiable ops with explicit backward kernels.

Every function takes and returns :class:`~sitsforecast.core.tape.Var`
(plain arrays are accepted and treated as constants). Backward closures
only compute gradients for inputs that require them.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigurationError, DimensionError
from . import kernels
from .tape import Var, as_var, record

ACTIVATIONS = ("none", "relu", "gelu", "sigmoid", "silu")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), a.value + b.value, backward)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), a.value - b.value, backward)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.value * b.value, backward)


def scale(a, c: float) -> Var:
    a = as_var(a)
    return record("scale", (a,), a.value * c, lambda g: (g * c,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives sigmoid(0) == 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return record("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def sigmoid(x) -> Var:
    x = as_var(x)
    y = sigmoid_array(x.value)
    return record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def silu(x) -> Var:
    x = as_var(x)
    s = sigmoid_array(x.value)
    y = x.value * s
    return record("silu", (x,), y, lambda g: (g * (s + x.value * s * (1.0 - s)),))


def gelu(x) -> Var:
    """GELU, tanh approximation."""
    x = as_var(x)
    v = x.value
    u = _GELU_C * (v + 0.044715 * v ** 3)
    th = np.tanh(u)
    y = 0.5 * v * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * du),)

    return record("gelu", (x,), y, backward)


def activate(x, activation: str) -> Var:
    if activation == "none":
        return as_var(x)
    fn = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid, "silu": silu}.get(activation)
    if fn is None:
        raise ConfigurationError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    return fn(x)


# -- shape ops ---------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Var:
    x = as_var(x)
    orig = x.shape
    return record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(x, axes: Sequence[int]) -> Var:
    x = as_var(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(
        "transpose", (x,), np.ascontiguousarray(x.value.transpose(axes)),
        lambda g: (g.transpose(inv),),
    )


def broadcast_to(x, shape: Sequence[int]) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    return record(
        "broadcast_to", (x,), np.broadcast_to(x.value, shape).copy(),
        lambda g: (_unbroadcast(g, x.shape),),
    )


def concat(xs: Sequence, axis: int) -> Var:
    xs = [as_var(x) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", xs, value, backward)


def take(x, indices: Sequence[int], axis: int) -> Var:
    """Gather along ``axis``; the backward scatter-adds (indices may repeat)."""
    x = as_var(x)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros(x.shape)
        np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return record("take", (x,), np.take(x.value, idx, axis=axis), backward)


def mean(x, axis, keepdims: bool = False) -> Var:
    x = as_var(x)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return record("mean", (x,), x.value.mean(axis=axes, keepdims=keepdims), backward)


def sum_all(x) -> Var:
    x = as_var(x)
    return record("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.full(x.shape, float(g)),))


def mse(pred, target) -> Var:
    """Mean squared error over all elements."""
    pred, target = as_var(pred), as_var(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target.value
    n = diff.size

    def backward(g):
        gd = 2.0 * float(g) * diff / n
        return gd, -gd

    return record("mse", (pred, target), np.asarray(np.mean(diff * diff)), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return record("matmul", (a, b), np.matmul(a.value, b.value), backward)


def linear(x, w, b=None) -> Var:
    x, w = as_var(x), as_var(w)
    d_in = w.shape[0]
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.value.T).reshape(x.shape) if x.requires_grad else None
        gw = x.value.reshape(-1, d_in).T @ g2 if w.requires_grad else None
        out = [gx, gw]
        if b is not None:
            out.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(out)

    y = (x.value.reshape(-1, d_in) @ w.value).reshape(lead + (w.shape[1],))
    inputs = [x, w]
    if b is not None:
        b = as_var(b)
        y = y + b.value
        inputs.append(b)
    return record("linear", inputs, y, backward)


def dense_apply(x, weights, bias, activation: str = "none") -> Var:
    """Affine map over the last axis followed by an activation."""
    x, weights, bias = as_var(x), as_var(weights), as_var(bias)
    if weights.ndim != 2:
        raise DimensionError(f"weights must be 2-D [d_in, d_out], got shape {weights.shape}")
    if x.ndim < 1 or x.shape[-1] != weights.shape[0]:
        raise DimensionError(
            f"x last axis ({x.shape[-1] if x.ndim else 'scalar'}) != weights axis 0 ({weights.shape[0]})"
        )
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} != (d_out={weights.shape[1]},)")
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    return activate(linear(x, weights, bias), activation)


def layernorm(x, gamma, beta, eps: float = LN_EPS) -> Var:
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record("layernorm", (x, gamma, beta), xhat * gamma.value + beta.value, backward)


def softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, backward)


# -- convolution / resampling ------------------------------------------------

def conv3d_apply(x, kernels_, bias) -> Var:
    """Same-padded 3-D cross-correlation ``[B,C,T,H,W] -> [B,C',T,H,W]``."""
    x, k, b = as_var(x), as_var(kernels_), as_var(bias)
    if x.ndim != 5 or k.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and kernels, got {x.shape} and {k.shape}")
    B, C, T, H, W = x.shape
    Co, Ck, kt, kh, kw = k.shape
    if Ck != C:
        raise DimensionError(f"conv3d channel mismatch: input has {C}, kernels expect {Ck}")
    if b.shape != (Co,):
        raise DimensionError(f"conv3d bias shape {b.shape} != ({Co},)")
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"same padding needs odd kernel extents, got {(kt, kh, kw)}")
    K = C * kt * kh * kw
    S = T * H * W
    cols = kernels.im2col(x.value, kt, kh, kw).reshape(B, K, S)
    wmat = k.value.reshape(Co, K)
    y = np.matmul(wmat, cols) + b.value[None, :, None]

    def backward(g):
        g3 = g.reshape(B, Co, S)
        gx = gk = gb = None
        if k.requires_grad:
            # per-item GEMMs read cols in place; tensordot would copy it
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        if b.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(B, C, kt, kh, kw, T, H, W)
            gx = kernels.col2im(dcols, T, H, W)
        return gx, gk, gb

    return record("conv3d", (x, k, b), y.reshape(B, Co, T, H, W), backward)


def conv2d_apply(x, kernels_, bias) -> Var:
    """Same-padded 2-D convolution, routed through the 3-D kernel with T=1."""
    x, k = as_var(x), as_var(kernels_)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape} and {k.shape}")
    B, C, H, W = x.shape
    Co, Ck, kh, kw = k.shape
    y = conv3d_apply(reshape(x, (B, C, 1, H, W)), reshape(k, (Co, Ck, 1, kh, kw)), bias)
    return reshape(y, (B, Co, H, W))


def avgpool2(x) -> Var:
    x = as_var(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avgpool2 needs even spatial dims, got {(H, W)}")
    y = x.value.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return record("avgpool2", (x,), y, backward)


def upsample2(x) -> Var:
    x = as_var(x)
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return record("upsample2", (x,), y, backward)


# -- attention ---------------------------------------------------------------

ATTENTION_KEYS = ("ln_scale", "ln_shift", "wq", "wk", "wv", "wo")
FFN_KEYS = ("ffn_ln_scale", "ffn_ln_shift", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


def attention_apply(x, params: Mapping[str, Var], heads: int, return_probs: bool = False):
    """Pre-layernorm self-attention block ``y = x + Attn(LN(x))`` over ``x[S, L, d]``.

    When ``params`` also carries the ``ffn_*`` keys a feed-forward sublayer
    ``y + W2 gelu(W1 LN(y))`` follows.
    """
    x = as_var(x)
    if x.ndim != 3:
        raise DimensionError(f"attention expects [S, L, d], got {x.shape}")
    S, L, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model dim {d} is not divisible by heads={heads}")
    if L < 1:
        raise DimensionError("attention needs at least one position")
    dh = d // heads
    h = layernorm(x, params["ln_scale"], params["ln_shift"])
    q = linear(h, params["wq"])
    k = linear(h, params["wk"])
    v = linear(h, params["wv"])

    def split(t):
        return transpose(reshape(t, (S, L, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (S, L, d))
    y = add(x, linear(ctx, params["wo"]))
    if "ffn_w1" in params:
        h2 = layernorm(y, params["ffn_ln_scale"], params["ffn_ln_shift"])
        ff = linear(gelu(linear(h2, params["ffn_w1"], params["ffn_b1"])), params["ffn_w2"], params["ffn_b2"])
        y = add(y, ff)
    if return_probs:
        return y, probs.value
    return y


def dropout(x, p: float, rng: np.random.Generator | None = None) -> Var:
    """Inverted dropout; identity unless an explicit generator is supplied."""
    x = as_var(x)
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", (x,), x.value * keep, lambda g: (g * keep,))
