"""Decoder-only transformer with explicit forward/backward passes and hooks.

The network is a standard pre-norm GPT block stack written directly in
numpy so every intermediate tensor is addressable.  Three submodule kinds
per layer expose hook points where an interceptor may observe or rewrite
tensors, in three phases:

* ``fwd_outputs``       the submodule's forward output
* ``bwd_grad_inputs``   the gradient leaving the submodule toward its input
* ``bwd_grad_weights``  one of the submodule's weight gradients

Hooked tensors are quantized to the training format before the hook runs,
so re-quantizing a hooked tensor under a freshly computed scale is the
identity.  The residual stream, attention internals, embeddings, the final
norm and the output head all stay in the wide dtype.  Gradients do not
differentiate through quantization (straight-through); instead the same
boundary tensors are quantized on the way back.

Each layer has two norm instances.  ``ln_slot`` selects which one carries
the layer's LayerNorm hook; the non-selected instance still quantizes its
boundary tensors identically, so the slot choice never changes numerics
when the interceptor is an identity.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .tensorops import (
    cross_entropy_bwd,
    cross_entropy_fwd,
    embedding_bwd,
    gelu_bwd,
    gelu_fwd,
    layernorm_bwd,
    layernorm_fwd,
    matmul_bwd,
    softmax_bwd,
    softmax_fwd,
)

__all__ = [
    "Submodule",
    "Phase",
    "HookPoint",
    "ModelConfig",
    "init_params",
    "param_shapes",
    "weight_tensor_names",
    "ForwardCache",
    "forward",
    "backward",
    "loss_and_grads",
]


class Submodule(str, Enum):
    MHA = "mha"
    MLP = "mlp"
    LAYERNORM = "layernorm"


class Phase(str, Enum):
    FWD_OUTPUTS = "fwd_outputs"
    BWD_GRAD_INPUTS = "bwd_grad_inputs"
    BWD_GRAD_WEIGHTS = "bwd_grad_weights"


@dataclass(frozen=True)
class HookPoint:
    layer: int
    submodule: Submodule
    phase: Phase


Interceptor = Callable[[HookPoint, np.ndarray], np.ndarray]
Quant = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 256
    d_ff: int = 1024
    seq_len: int = 128
    vocab_size: int = 256
    init_seed: int = 0
    ln_eps: float = 1e-5
    wide_dtype: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.wide_dtype not in ("f32", "f64"):
            raise ValueError("wide_dtype must be 'f32' or 'f64'")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.wide_dtype == "f32" else np.float64)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in their canonical (flattening) order."""
    d, f, v, t = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.seq_len
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (t, d),
    }
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.w_qkv"] = (d, 3 * d)
        shapes[p + "attn.b_qkv"] = (3 * d,)
        shapes[p + "attn.w_out"] = (d, d)
        shapes[p + "attn.b_out"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.w_fc1"] = (d, f)
        shapes[p + "mlp.b_fc1"] = (f,)
        shapes[p + "mlp.w_fc2"] = (f, d)
        shapes[p + "mlp.b_fc2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.w"] = (d, v)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded initialization: N(0, 0.02) matrices, zero biases, unit gains."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, 0]))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g" or name.endswith("ln1.g") or name.endswith("ln2.g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(cfg.dtype)
    return params


def weight_tensor_names(layer: int, submodule: Submodule, ln_slot: int = 0) -> list[str]:
    """Ordered weight tensors of a hooked submodule instance."""
    p = f"l{layer}."
    if submodule is Submodule.MHA:
        return [p + "attn.w_qkv", p + "attn.b_qkv", p + "attn.w_out", p + "attn.b_out"]
    if submodule is Submodule.MLP:
        return [p + "mlp.w_fc1", p + "mlp.b_fc1", p + "mlp.w_fc2", p + "mlp.b_fc2"]
    ln = "ln1" if ln_slot == 0 else "ln2"
    return [f"{p}{ln}.g", f"{p}{ln}.b"]


@functools.lru_cache(maxsize=8)
def _causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def _identity_quant(x: np.ndarray) -> np.ndarray:
    return x


def _identity_hook(hook: HookPoint, x: np.ndarray) -> np.ndarray:
    return x


@dataclass
class _LayerCache:
    ln1: tuple
    h1: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    attn_p: np.ndarray
    ctx: np.ndarray
    ln2: tuple
    h2: np.ndarray
    u: np.ndarray
    gl: np.ndarray
    gt: np.ndarray  # tanh cached by gelu_fwd, reused in the backward pass


@dataclass
class ForwardCache:
    tokens: np.ndarray
    targets: np.ndarray
    layers: list[_LayerCache]
    x0: np.ndarray
    ln_f: tuple
    xf: np.ndarray
    probs: np.ndarray
    loss: float
    hooked_nonfinite: bool = False
    nonfinite_hooks: list[HookPoint] = field(default_factory=list)


def forward(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    targets: np.ndarray,
    cfg: ModelConfig,
    *,
    quant: Quant | None = None,
    interceptor: Interceptor | None = None,
    ln_slot: int = 0,
) -> ForwardCache:
    """Full forward pass; returns loss plus every tensor backward needs.

    ``quant`` is applied to each hooked submodule output before the
    interceptor sees it.  Non-finite values in any hooked tensor are
    recorded on the cache after the interceptor has run, so injected
    non-finite patterns are observed exactly where training would see them.
    """
    if ln_slot not in (0, 1):
        raise ValueError("ln_slot must be 0 or 1")
    q = quant or _identity_quant
    hook = interceptor or _identity_hook
    b, t = tokens.shape
    if t > cfg.seq_len:
        raise ValueError(f"sequence length {t} exceeds configured {cfg.seq_len}")
    h, dk = cfg.n_heads, cfg.d_head
    inv = 1.0 / np.sqrt(np.asarray(dk, dtype=cfg.dtype))
    mask = _causal_mask(t)
    neg_inf = np.asarray(-np.inf, dtype=cfg.dtype)

    nonfinite_hooks: list[HookPoint] = []

    def hooked(layer: int, sub: Submodule, x: np.ndarray) -> np.ndarray:
        hp = HookPoint(layer, sub, Phase.FWD_OUTPUTS)
        x = hook(hp, q(x))
        if not np.all(np.isfinite(x)):
            nonfinite_hooks.append(hp)
        return x

    x = params["tok_emb"][tokens] + params["pos_emb"][:t]
    x0 = x
    layers: list[_LayerCache] = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        ln1_out, ln1_cache = layernorm_fwd(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
        if ln_slot == 0:
            h1 = hooked(i, Submodule.LAYERNORM, ln1_out)
        else:
            h1 = q(ln1_out)

        qkv = h1 @ params[p + "attn.w_qkv"] + params[p + "attn.b_qkv"]
        qh = qkv[..., : cfg.d_model].reshape(b, t, h, dk).transpose(0, 2, 1, 3)
        kh = qkv[..., cfg.d_model : 2 * cfg.d_model].reshape(b, t, h, dk).transpose(0, 2, 1, 3)
        vh = qkv[..., 2 * cfg.d_model :].reshape(b, t, h, dk).transpose(0, 2, 1, 3)
        scores = (qh @ np.swapaxes(kh, -1, -2)) * inv
        attn_p = softmax_fwd(np.where(mask, scores, neg_inf))
        ctx = (attn_p @ vh).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        attn_out = ctx @ params[p + "attn.w_out"] + params[p + "attn.b_out"]
        a = hooked(i, Submodule.MHA, attn_out)
        x1 = x + a

        ln2_out, ln2_cache = layernorm_fwd(x1, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        if ln_slot == 1:
            h2 = hooked(i, Submodule.LAYERNORM, ln2_out)
        else:
            h2 = q(ln2_out)

        u = h2 @ params[p + "mlp.w_fc1"] + params[p + "mlp.b_fc1"]
        gl, gt = gelu_fwd(u, with_tanh=True)
        mlp_out = gl @ params[p + "mlp.w_fc2"] + params[p + "mlp.b_fc2"]
        m = hooked(i, Submodule.MLP, mlp_out)
        x = x1 + m

        layers.append(
            _LayerCache(ln1_cache, h1, qh, kh, vh, attn_p, ctx, ln2_cache, h2, u, gl, gt)
        )

    xf, lnf_cache = layernorm_fwd(x, params["ln_f.g"], params["ln_f.b"], cfg.ln_eps)
    logits = xf.reshape(b * t, cfg.d_model) @ params["head.w"]
    loss, probs = cross_entropy_fwd(logits, targets.reshape(-1))

    return ForwardCache(
        tokens=tokens,
        targets=targets,
        layers=layers,
        x0=x0,
        ln_f=lnf_cache,
        xf=xf,
        probs=probs,
        loss=loss,
        hooked_nonfinite=bool(nonfinite_hooks),
        nonfinite_hooks=nonfinite_hooks,
    )


def backward(
    params: dict[str, np.ndarray],
    cache: ForwardCache,
    cfg: ModelConfig,
    *,
    quant: Quant | None = None,
    interceptor: Interceptor | None = None,
    ln_slot: int = 0,
    weight_slot: int = 0,
    loss_scale: float = 1.0,
) -> dict[str, np.ndarray]:
    """Gradients of ``loss_scale * loss`` for every parameter.

    Weight gradients and input gradients of hooked submodules are
    quantized before their hooks fire; the hook for ``bwd_grad_weights``
    receives the ``weight_slot``-th tensor of the submodule's canonical
    weight order.  Embedding, final-norm and head gradients stay wide.
    """
    if ln_slot not in (0, 1):
        raise ValueError("ln_slot must be 0 or 1")
    q = quant or _identity_quant
    hook = interceptor or _identity_hook
    b, t = cache.tokens.shape
    h, dk = cfg.n_heads, cfg.d_head
    inv = 1.0 / np.sqrt(np.asarray(dk, dtype=cfg.dtype))
    mask = _causal_mask(t)
    grads: dict[str, np.ndarray] = {}

    def hook_weights(layer: int, sub: Submodule, tensors: dict[str, np.ndarray]) -> None:
        """Quantize a submodule's weight grads; hook exactly one of them."""
        names = list(tensors)
        for n in names:
            tensors[n] = q(tensors[n])
        slot = weight_slot % len(names)
        target = names[slot]
        tensors[target] = hook(HookPoint(layer, sub, Phase.BWD_GRAD_WEIGHTS), tensors[target])
        grads.update(tensors)

    def hook_inputs(layer: int, sub: Submodule, g: np.ndarray) -> np.ndarray:
        return hook(HookPoint(layer, sub, Phase.BWD_GRAD_INPUTS), q(g))

    dlogits = cross_entropy_bwd(cache.probs, cache.targets.reshape(-1), gloss=loss_scale)
    xf2 = cache.xf.reshape(b * t, cfg.d_model)
    grads["head.w"] = xf2.T @ dlogits
    dxf = (dlogits @ params["head.w"].T).reshape(b, t, cfg.d_model)
    dx, dgf, dbf = layernorm_bwd(dxf, cache.ln_f)
    grads["ln_f.g"] = dgf
    grads["ln_f.b"] = dbf

    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        lc = cache.layers[i]

        # MLP branch; straight-through at the hooked output
        dm = dx
        dm2 = dm.reshape(b * t, cfg.d_model)
        gl2 = lc.gl.reshape(b * t, cfg.d_ff)
        dw_fc2 = gl2.T @ dm2
        db_fc2 = dm2.sum(axis=0)
        dgl = dm @ params[p + "mlp.w_fc2"].T
        du = gelu_bwd(dgl, lc.u, tanh_u=lc.gt)
        du2 = du.reshape(b * t, cfg.d_ff)
        h22 = lc.h2.reshape(b * t, cfg.d_model)
        dw_fc1 = h22.T @ du2
        db_fc1 = du2.sum(axis=0)
        dh2 = du @ params[p + "mlp.w_fc1"].T
        hook_weights(
            i,
            Submodule.MLP,
            {
                p + "mlp.w_fc1": dw_fc1,
                p + "mlp.b_fc1": db_fc1,
                p + "mlp.w_fc2": dw_fc2,
                p + "mlp.b_fc2": db_fc2,
            },
        )
        dh2 = hook_inputs(i, Submodule.MLP, dh2)

        dx1_ln, dg2, db2 = layernorm_bwd(dh2, lc.ln2)
        dg2, db2, dx1_ln = q(dg2), q(db2), q(dx1_ln)
        if ln_slot == 1:
            pair = {p + "ln2.g": dg2, p + "ln2.b": db2}
            names = list(pair)
            target = names[weight_slot % 2]
            pair[target] = hook(HookPoint(i, Submodule.LAYERNORM, Phase.BWD_GRAD_WEIGHTS), pair[target])
            dg2, db2 = pair[p + "ln2.g"], pair[p + "ln2.b"]
            dx1_ln = hook(HookPoint(i, Submodule.LAYERNORM, Phase.BWD_GRAD_INPUTS), dx1_ln)
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dx1 = dx + dx1_ln

        # attention branch
        da = dx1
        da2 = da.reshape(b * t, cfg.d_model)
        ctx2 = lc.ctx.reshape(b * t, cfg.d_model)
        dw_out = ctx2.T @ da2
        db_out = da2.sum(axis=0)
        dctx = (da @ params[p + "attn.w_out"].T).reshape(b, t, h, dk).transpose(0, 2, 1, 3)
        dpa = dctx @ np.swapaxes(lc.vh, -1, -2)
        dvh = np.swapaxes(lc.attn_p, -1, -2) @ dctx
        ds = np.where(mask, softmax_bwd(dpa, lc.attn_p), 0.0) * inv
        dqh = ds @ lc.kh
        dkh = np.swapaxes(ds, -1, -2) @ lc.qh
        dqkv = np.concatenate(
            [
                dqh.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model),
                dkh.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model),
                dvh.transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model),
            ],
            axis=-1,
        )
        dqkv2 = dqkv.reshape(b * t, 3 * cfg.d_model)
        h12 = lc.h1.reshape(b * t, cfg.d_model)
        dw_qkv = h12.T @ dqkv2
        db_qkv = dqkv2.sum(axis=0)
        dh1 = dqkv @ params[p + "attn.w_qkv"].T
        hook_weights(
            i,
            Submodule.MHA,
            {
                p + "attn.w_qkv": dw_qkv,
                p + "attn.b_qkv": db_qkv,
                p + "attn.w_out": dw_out,
                p + "attn.b_out": db_out,
            },
        )
        dh1 = hook_inputs(i, Submodule.MHA, dh1)

        dx_ln, dg1, db1 = layernorm_bwd(dh1, lc.ln1)
        dg1, db1, dx_ln = q(dg1), q(db1), q(dx_ln)
        if ln_slot == 0:
            pair = {p + "ln1.g": dg1, p + "ln1.b": db1}
            names = list(pair)
            target = names[weight_slot % 2]
            pair[target] = hook(HookPoint(i, Submodule.LAYERNORM, Phase.BWD_GRAD_WEIGHTS), pair[target])
            dg1, db1 = pair[p + "ln1.g"], pair[p + "ln1.b"]
            dx_ln = hook(HookPoint(i, Submodule.LAYERNORM, Phase.BWD_GRAD_INPUTS), dx_ln)
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dx = dx1 + dx_ln

    grads["tok_emb"] = embedding_bwd(dx, cache.tokens, cfg.vocab_size)
    dpos = np.zeros_like(params["pos_emb"])
    dpos[:t] = dx.sum(axis=0)
    grads["pos_emb"] = dpos

    return {name: grads[name] for name in param_shapes(cfg)}


def loss_and_grads(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    targets: np.ndarray,
    cfg: ModelConfig,
    **kw,
) -> tuple[float, dict[str, np.ndarray], ForwardCache]:
    """Convenience wrapper used by tests and the trainer's inner loop."""
    fwd_kw = {k: kw[k] for k in ("quant", "interceptor", "ln_slot") if k in kw}
    cache = forward(params, tokens, targets, cfg, **fwd_kw)
    grads = backward(params, cache, cfg, **kw)
    return cache.loss, grads, cache
