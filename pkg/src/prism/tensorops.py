"""Numeric kernels with hand-written backward passes, plus quantization.

All kernels compute in the caller's wide dtype (float32 or float64) and
are deterministic: fixed reduction orders, no threading assumptions
beyond a fixed BLAS configuration.  Quantization is the only place where
storage formats enter; it happens at submodule boundaries, driven by the
model, never inside a kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .softfp import FormatSpec, round_array

__all__ = [
    "ScaleState",
    "jit_scale",
    "quantize",
    "matmul_fwd",
    "matmul_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "embedding_fwd",
    "embedding_bwd",
    "cross_entropy_fwd",
    "cross_entropy_bwd",
    "dp_average",
]


# ── quantization ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class ScaleState:
    """Per-tensor scaling state for the 8-bit formats."""

    amax: float
    scale: float


def jit_scale(x: np.ndarray, spec: FormatSpec) -> ScaleState:
    """Just-in-time per-tensor scale: largest power of two with
    ``amax * scale <= max_finite``.

    A power of two keeps the scale multiply/divide exact, which makes
    re-quantization under a freshly computed scale a bitwise no-op; a
    free-form ratio would smear every element by an ulp each pass.
    """
    a = np.abs(x)
    amax = float(a.max()) if a.size else 0.0
    if not math.isfinite(amax):
        # rare path: mask out NaN/Inf elements before taking the max
        finite = np.isfinite(a)
        amax = float(np.max(a[finite])) if finite.any() else 0.0
    if amax == 0.0:
        return ScaleState(amax=amax, scale=1.0)
    k = math.floor(math.log2(spec.max_finite / amax))
    k = max(-126, min(126, k))
    return ScaleState(amax=amax, scale=math.ldexp(1.0, k))


def _fast_round(x: np.ndarray, spec: FormatSpec) -> np.ndarray:
    """Value-equal shortcut for round_array on the 16-bit stock formats.

    Dispatches on the format's structure; anything unrecognized falls
    back to the reference path.  Equivalence is bitwise and covered by
    exhaustive tests against round_array.  The 8-bit formats stay on the
    reference path: its frexp/rint form is already the fast algorithm.
    """
    if spec.width == 16 and spec.exp_bits == 5 and spec.has_infinity:
        with np.errstate(over="ignore", invalid="ignore"):
            y = x.astype(np.float16).astype(x.dtype)
        over = np.isinf(y) & np.isfinite(x)
        if over.any():
            y = np.where(over, np.copysign(x.dtype.type(spec.max_finite), x), y)
        return y
    if spec.width == 16 and spec.exp_bits == 8 and spec.has_infinity and x.dtype == np.float32:
        u = np.ascontiguousarray(x).view(np.uint32)
        r = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) & np.uint32(
            0xFFFF0000
        )
        y = r.view(np.float32)
        bad = ~np.isfinite(x)
        over = np.isinf(y) & ~bad
        if over.any():
            y = np.where(over, np.copysign(np.float32(spec.max_finite), x), y)
        if bad.any():
            # the bit trick can carry a NaN payload into the Inf encoding
            y = np.where(np.isnan(x), np.float32(np.nan), y)
        return y
    return round_array(x, spec)


def quantize(x: np.ndarray, spec: FormatSpec, scale: ScaleState | None = None) -> np.ndarray:
    """Elementwise round of a wide tensor through the storage format.

    With a ScaleState the value is scaled into the format's range before
    rounding and scaled back after, emulating per-tensor scaled storage.
    """
    if scale is None or scale.scale == 1.0:
        return _fast_round(x, spec)
    s = x.dtype.type(scale.scale)
    with np.errstate(over="ignore", invalid="ignore"):
        return _fast_round(x * s, spec) / s


# ── matmul ───────────────────────────────────────────────────────────


def matmul_fwd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def matmul_bwd(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``a @ b`` for matching-rank operands (2-D or batched)."""
    da = g @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ g
    return da, db


# ── layer normalization ──────────────────────────────────────────────


def layernorm_fwd(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, tuple]:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layernorm_bwd(g: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gain = cache
    red = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=red)
    dbias = g.sum(axis=red)
    gd = g * gain
    dx = inv_std * (
        gd
        - gd.mean(axis=-1, keepdims=True)
        - xhat * (gd * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ── GELU (tanh approximation) ────────────────────────────────────────

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_fwd(x: np.ndarray, with_tanh: bool = False):
    """Tanh-approximation GELU; optionally also returns the inner tanh.

    The tanh dominates the cost, so callers that will run a backward pass
    should keep it and hand it back to gelu_bwd.
    """
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    y = 0.5 * x * (1.0 + t)
    return (y, t) if with_tanh else y


def gelu_bwd(g: np.ndarray, x: np.ndarray, tanh_u: np.ndarray | None = None) -> np.ndarray:
    x2 = x * x
    if tanh_u is None:
        tanh_u = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return g * (0.5 * (1.0 + tanh_u) + 0.5 * x * (1.0 - tanh_u * tanh_u) * du)


# ── softmax ──────────────────────────────────────────────────────────


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis.  Non-finite rows stay non-finite."""
    with np.errstate(invalid="ignore"):
        z = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(g: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


# ── embedding ────────────────────────────────────────────────────────


def embedding_fwd(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def embedding_bwd(g: np.ndarray, ids: np.ndarray, n_rows: int) -> np.ndarray:
    dtable = np.zeros((n_rows, g.shape[-1]), dtype=g.dtype)
    np.add.at(dtable, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
    return dtable


# ── cross entropy (nats) ─────────────────────────────────────────────


def cross_entropy_fwd(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood in nats over all positions.

    logits: (N, V); targets: (N,) integer class ids.
    """
    with np.errstate(invalid="ignore"):
        m = np.max(logits, axis=-1, keepdims=True)
        z = logits - m
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        nll = -logp[np.arange(logits.shape[0]), targets]
        probs = np.exp(logp)
    return float(nll.mean()), probs


def cross_entropy_bwd(probs: np.ndarray, targets: np.ndarray, gloss: float = 1.0) -> np.ndarray:
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), targets] -= 1.0
    return d * (gloss / n)


# ── data-parallel gradient averaging ─────────────────────────────────


def dp_average(grads: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Mean of per-rank gradient dicts, accumulated in rank order.

    The reduction order is fixed (rank 0, 1, ...) so results are bitwise
    reproducible; a corrupted tensor on one rank is diluted by 1/N.
    """
    if not grads:
        raise ValueError("dp_average needs at least one rank")
    n = len(grads)
    out = {k: v.copy() for k, v in grads[0].items()}
    for rank in grads[1:]:
        for k in out:
            out[k] += rank[k]
    for k in out:
        out[k] /= n
    return out
