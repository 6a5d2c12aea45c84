"""Fault site description, per-step arming and tensor corruption.

A fault site is pinned to one data-parallel rank and wakes up at a fixed
onset step; from then on each training step activates it with a fixed
probability.  Every activation independently resamples where the fault
lands (phase, layer, submodule, norm instance, weight tensor, tile) and
which signature shapes the damage, all from one dedicated RNG stream, so
a run is reproducible from its seed alone.

Corruption happens in the bit space of the training format: the already
quantized tensor is encoded (under a freshly computed power-of-two scale
for the 8-bit formats), the planned bit operations are applied, and the
result is decoded back.  Decoded patterns are deliberately not
re-saturated; a flip that lands on an exponent bit may well produce an
infinity or NaN, which is exactly the behavior under study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import HookPoint, Phase, Submodule
from .signatures import ErrorSignature, plan_corruption, sample_signature
from .softfp import BitPattern, FormatSpec, apply_bit_ops, decode_array, encode_array
from .tensorops import jit_scale

__all__ = [
    "FaultSiteTuple",
    "ArmedFault",
    "CorruptionRecord",
    "apply_fault",
    "FaultEngine",
]

_ALL_PHASES = (Phase.FWD_OUTPUTS, Phase.BWD_GRAD_INPUTS, Phase.BWD_GRAD_WEIGHTS)


@dataclass(frozen=True)
class FaultSiteTuple:
    """Static description of one defective-device scenario."""

    rank: int = 0
    checkpoint: int = 0
    rate: float = 1.0
    density: float = 1.0
    tile: int = 16
    phases: tuple[Phase, ...] = _ALL_PHASES
    layers: tuple[int, ...] | None = None
    signatures: tuple[ErrorSignature, ...] = ()

    def __post_init__(self):
        if self.rank < 0:
            raise ValueError("rank must be non-negative")
        if self.checkpoint < 0:
            raise ValueError("checkpoint step must be non-negative")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError("rate must be in (0, 1]")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must be in (0, 1]")
        if self.tile < 1:
            raise ValueError("tile must be positive")
        if not self.phases:
            raise ValueError("at least one phase required")
        if self.layers is not None and not self.layers:
            raise ValueError("layers must be None (all) or non-empty")
        if not self.signatures:
            raise ValueError("at least one signature required")
        for sig in self.signatures:
            sig.validate()

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "checkpoint": self.checkpoint,
            "rate": self.rate,
            "density": self.density,
            "tile": self.tile,
            "phases": [p.value for p in self.phases],
            "layers": list(self.layers) if self.layers is not None else None,
            "signatures": [sig.to_json() for sig in self.signatures],
        }

    @classmethod
    def from_json(cls, d: dict) -> "FaultSiteTuple":
        return cls(
            rank=int(d["rank"]),
            checkpoint=int(d["checkpoint"]),
            rate=float(d["rate"]),
            density=float(d["density"]),
            tile=int(d["tile"]),
            phases=tuple(Phase(p) for p in d["phases"]),
            layers=tuple(d["layers"]) if d["layers"] is not None else None,
            signatures=tuple(ErrorSignature.from_json(s) for s in d["signatures"]),
        )


@dataclass(frozen=True)
class ArmedFault:
    """One activation: where this step's corruption lands."""

    hook: HookPoint
    ln_slot: int
    weight_slot: int
    signature: ErrorSignature


@dataclass
class CorruptionRecord:
    """Audit trail of one activation's actual bit damage."""

    step: int
    hook: HookPoint
    signature: str
    flat_idx: np.ndarray
    old_bits: np.ndarray
    new_bits: np.ndarray
    old_vals: np.ndarray
    new_vals: np.ndarray
    n_planned: int

    @property
    def n_changed(self) -> int:
        return len(self.flat_idx)

    @property
    def n_bits_changed(self) -> int:
        diff = np.bitwise_xor(self.old_bits, self.new_bits)
        return int(sum(bin(int(d)).count("1") for d in diff))

    @property
    def introduced_nonfinite(self) -> bool:
        return bool(np.any(~np.isfinite(self.new_vals)))


def _as_2d(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return 1, shape[0]
    rows = 1
    for s in shape[:-1]:
        rows *= s
    return rows, shape[-1]


def apply_fault(
    x: np.ndarray,
    sig: ErrorSignature,
    spec: FormatSpec,
    tile: int,
    density: float,
    rng: np.random.Generator,
    step: int = -1,
    hook: HookPoint | None = None,
) -> tuple[np.ndarray, CorruptionRecord]:
    """Corrupt one tile of ``x`` according to a signature.

    ``x`` must already hold values representable in ``spec`` (for the
    8-bit formats, representable under the fresh power-of-two scale this
    function recomputes).  The input is never modified; elements whose
    bits come out unchanged (a stuck bit that was already there) are left
    untouched in the output too.
    """
    r, c = _as_2d(x.shape)
    # 1-D tensors use one flat tile with the same element count
    th, tw = (1, tile * tile) if x.ndim == 1 else (tile, tile)
    n_tr, n_tc = math.ceil(r / th), math.ceil(c / tw)
    t_r = int(rng.integers(n_tr))
    t_c = int(rng.integers(n_tc))
    r0, c0 = t_r * th, t_c * tw
    eff_h, eff_w = min(th, r - r0), min(tw, c - c0)

    plan = plan_corruption(sig, eff_h, eff_w, density, spec, rng)
    rows = plan.rows + r0
    cols = plan.cols + c0

    if spec.width == 8:
        scale = jit_scale(x, spec).scale
    else:
        scale = 1.0

    view = x.reshape(r, c)
    vals = np.asarray(view[rows, cols], dtype=np.float64)
    old_bits = encode_array(vals * scale, spec)
    new_bits = old_bits.copy()
    for i, blist in enumerate(plan.bits):
        pat = apply_bit_ops(BitPattern(int(new_bits[i]), spec), [(b, plan.mode) for b in blist])
        new_bits[i] = pat.bits
    changed = new_bits != old_bits

    new_vals = decode_array(new_bits, spec) / scale
    flat = rows.astype(np.int64) * c + cols.astype(np.int64)

    record = CorruptionRecord(
        step=step,
        hook=hook,
        signature=sig.name,
        flat_idx=flat[changed],
        old_bits=old_bits[changed].astype(np.uint32),
        new_bits=new_bits[changed].astype(np.uint32),
        old_vals=vals[changed],
        new_vals=new_vals[changed],
        n_planned=len(plan),
    )
    if not changed.any():
        return x, record
    out = x.copy()
    out.reshape(r, c)[rows[changed], cols[changed]] = new_vals[changed].astype(x.dtype)
    return out, record


class FaultEngine:
    """Per-step arming and interceptor construction for one fault site."""

    def __init__(self, site: FaultSiteTuple, n_layers: int, rng: np.random.Generator):
        if site.layers is not None and max(site.layers) >= n_layers:
            raise ValueError("fault site references a layer the model lacks")
        self.site = site
        self.n_layers = n_layers
        self.rng = rng
        self.records: list[CorruptionRecord] = []

    def arm(self, step: int) -> ArmedFault | None:
        """Bernoulli gate plus fresh placement draws for one step."""
        if step < self.site.checkpoint:
            return None
        if self.rng.random() >= self.site.rate:
            return None
        phase = self.site.phases[int(self.rng.integers(len(self.site.phases)))]
        layers = self.site.layers if self.site.layers is not None else tuple(range(self.n_layers))
        layer = int(layers[int(self.rng.integers(len(layers)))])
        subs = (Submodule.MHA, Submodule.MLP, Submodule.LAYERNORM)
        sub = subs[int(self.rng.integers(len(subs)))]
        ln_slot = int(self.rng.integers(2))
        weight_slot = int(self.rng.integers(4))
        sig = sample_signature(list(self.site.signatures), self.rng)
        return ArmedFault(HookPoint(layer, sub, phase), ln_slot, weight_slot, sig)

    def interceptor(self, armed: ArmedFault, step: int, spec: FormatSpec):
        """Hook callable that corrupts exactly the armed point."""

        def hook(hp: HookPoint, x: np.ndarray) -> np.ndarray:
            if hp != armed.hook:
                return x
            out, rec = apply_fault(
                x, armed.signature, spec, self.site.tile, self.site.density,
                self.rng, step=step, hook=hp,
            )
            self.records.append(rec)
            return out

        return hook
