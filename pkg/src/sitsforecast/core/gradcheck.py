"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import OracleError
from .params import ParamStore
from .tape import Tape, Var


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: int | None
    analytic: float
    numeric: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-5


# offsets (in units of h) and weights of the derivative stencils
STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def _scalar(v) -> float:
    value = v.value if isinstance(v, Var) else np.asarray(v)
    if value.size != 1:
        raise OracleError(f"objective must be scalar, got shape {value.shape}")
    return float(value.reshape(()))


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    f: Callable[[ParamStore], Var],
    store: ParamStore,
    h: float = 1e-5,
    samples: int = 8,
    names: Sequence[str] | None = None,
    rng: np.random.Generator | None = None,
    floor_scale: float = 0.0,
    order: int = 2,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(store)`` with central differences.

    ``samples`` coordinates are drawn per parameter (all of them when the
    parameter is smaller). ``names`` defaults to every parameter in the store.
    The error denominator is floored at ``max(floor_scale * max(1, |f|), 1e-12)``.
    A positive ``floor_scale`` stops derivatives far below the resolution of a
    finite difference (about ``eps * |f| / h``) from dominating the error.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``.
    """
    if order not in STENCILS:
        raise OracleError(f"unsupported stencil order {order}")
    offsets, weights = STENCILS[order]
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(store) if names is None else list(names)
    store.force_grad(names)
    try:
        store.zero_grad()
        with Tape() as tape:
            out = f(store)
        base = _scalar(out)
        if _scalar(f(store)) != base:
            raise OracleError("objective is not deterministic across repeated evaluation")
        tape.backward(out)
        analytic = {n: store.entry(n).grad.copy() for n in names}
        store.zero_grad()
    finally:
        store.force_grad(())

    floor = max(floor_scale * max(1.0, abs(base)), 1e-12)
    worst = GradCheckReport(0.0, None, None, 0.0, 0.0, 0)
    checked = 0
    for name in names:
        value = store[name]
        flat = value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            acc = 0.0
            for k, wk in zip(offsets, weights):
                flat[i] = orig + k * h
                acc += wk * _scalar(f(store))
            flat[i] = orig
            numeric = acc / h
            a = float(analytic[name].reshape(-1)[i])
            err = relative_error(a, numeric, floor)
            checked += 1
            if err > worst.max_rel_error or worst.worst_param is None:
                worst = GradCheckReport(err, name, int(i), a, numeric, 0)
    worst.n_checked = checked
    return worst
