"""Error signatures: portable descriptions of how a defect mangles bits.

A signature couples a spatial footprint (where in a tile the corrupted
elements sit) with a bit profile (which bits of each element are hit, how
many at once, and whether they flip or stick).  Bit positions are stated
in a fixed 16-bit reference layout, sign 15, exponent 14..10, mantissa
9..0, and remapped field-by-field onto whatever format the target tensor
uses, so one signature file drives campaigns across all four formats.

Signatures serialize to JSON Lines, one object per line.  Three built-in
archetypes cover a stuck compute tile, sporadic multiply-accumulate
flips, and a corrupted cache line along one row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .softfp import FP16, FlipMode, FormatSpec

__all__ = [
    "Spatial",
    "ErrorSignature",
    "REF_LAYOUT",
    "DEFAULT_MULTIPLICITY",
    "ARCHETYPES",
    "synth_archetype",
    "load_signatures",
    "save_signatures",
    "sample_signature",
    "remap_bit",
    "sample_bits",
    "CorruptionPlan",
    "plan_corruption",
]

REF_LAYOUT: FormatSpec = FP16

DEFAULT_MULTIPLICITY: dict[int, float] = {1: 0.80, 2: 0.15, 3: 0.05}

_SPATIAL_KINDS = ("patch", "scattered", "row", "column")


@dataclass(frozen=True)
class Spatial:
    """Footprint of corrupted elements inside one tile."""

    kind: str
    h: int = 1
    w: int = 1
    k: int = 1

    def validate(self) -> None:
        if self.kind not in _SPATIAL_KINDS:
            raise ValueError(f"unknown spatial kind {self.kind!r}")
        if self.kind == "patch" and (self.h < 1 or self.w < 1):
            raise ValueError("patch dimensions must be positive")
        if self.kind == "scattered" and self.k < 1:
            raise ValueError("scattered count must be positive")

    def base_count(self, tile_h: int, tile_w: int) -> int:
        """Elements the footprint covers at density 1 in an h x w tile."""
        if self.kind == "patch":
            return min(self.h, tile_h) * min(self.w, tile_w)
        if self.kind == "scattered":
            return min(self.k, tile_h * tile_w)
        if self.kind == "row":
            return tile_w
        return tile_h

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "patch":
            d["h"], d["w"] = self.h, self.w
        elif self.kind == "scattered":
            d["k"] = self.k
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "Spatial":
        s = cls(kind=obj.get("kind", ""), h=int(obj.get("h", 1)),
                w=int(obj.get("w", 1)), k=int(obj.get("k", 1)))
        s.validate()
        return s


@dataclass(frozen=True)
class ErrorSignature:
    name: str
    spatial: Spatial
    bit_pmf: dict[int, float]
    multiplicity: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_MULTIPLICITY))
    flip_mode: FlipMode = FlipMode.FLIP
    weight: float = 1.0

    def validate(self) -> None:
        self.spatial.validate()
        if not self.bit_pmf:
            raise ValueError(f"{self.name}: empty bit_pmf")
        for b in self.bit_pmf:
            if not 0 <= b < REF_LAYOUT.width:
                raise ValueError(f"{self.name}: bit {b} outside reference layout")
        for pmf, label in ((self.bit_pmf, "bit_pmf"), (self.multiplicity, "multiplicity")):
            total = sum(pmf.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"{self.name}: {label} sums to {total}, not 1")
            if any(p < 0 for p in pmf.values()):
                raise ValueError(f"{self.name}: negative probability in {label}")
        if any(m < 1 for m in self.multiplicity):
            raise ValueError(f"{self.name}: multiplicity keys must be >= 1")
        if self.weight <= 0:
            raise ValueError(f"{self.name}: weight must be positive")
        FlipMode(self.flip_mode)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "spatial": self.spatial.to_json(),
            "bit_pmf": {str(k): v for k, v in self.bit_pmf.items()},
            "multiplicity": {str(k): v for k, v in self.multiplicity.items()},
            "flip_mode": str(self.flip_mode.value),
            "weight": self.weight,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ErrorSignature":
        try:
            sig = cls(
                name=str(obj["name"]),
                spatial=Spatial.from_json(obj["spatial"]),
                bit_pmf={int(k): float(v) for k, v in obj["bit_pmf"].items()},
                multiplicity={
                    int(k): float(v)
                    for k, v in obj.get("multiplicity", DEFAULT_MULTIPLICITY).items()
                },
                flip_mode=FlipMode(obj.get("flip_mode", "flip")),
                weight=float(obj.get("weight", 1.0)),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed signature object: {exc}") from exc
        sig.validate()
        return sig


def load_signatures(path: str | Path) -> list[ErrorSignature]:
    """Read a JSONL signature file; errors carry the offending line number."""
    sigs: list[ErrorSignature] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                sigs.append(ErrorSignature.from_json(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not sigs:
        raise ValueError(f"{path}: no signatures found")
    return sigs


def save_signatures(path: str | Path, sigs: list[ErrorSignature]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sig in sigs:
            fh.write(json.dumps(sig.to_json()) + "\n")


# ── built-in archetypes ──────────────────────────────────────────────

ARCHETYPES = ("patch3x3", "fma_sporadic", "cacheline_row")


def synth_archetype(name: str, rng: np.random.Generator | None = None) -> ErrorSignature:
    """One of the built-in signature archetypes.

    patch3x3        a stuck bit in a 3x3 compute patch; a single exponent
                    bit (drawn once, from the reference exponent field)
                    sticks at one on every element of the patch
    fma_sporadic    four scattered elements, one to three flipped bits
                    drawn uniformly from the low mantissa byte and the two
                    low exponent bits
    cacheline_row   a whole tile row with flips biased toward the sign
                    and high exponent bits
    """
    rng = rng or np.random.default_rng(0)
    if name == "patch3x3":
        exp_lo = REF_LAYOUT.man_bits
        exp_hi = REF_LAYOUT.width - 2
        bit = int(rng.integers(exp_lo, exp_hi + 1))
        return ErrorSignature(
            name="patch3x3",
            spatial=Spatial(kind="patch", h=3, w=3),
            bit_pmf={bit: 1.0},
            multiplicity={1: 1.0},
            flip_mode=FlipMode.STUCK1,
        )
    if name == "fma_sporadic":
        bits = list(range(8)) + [10, 11]
        return ErrorSignature(
            name="fma_sporadic",
            spatial=Spatial(kind="scattered", k=4),
            bit_pmf={b: 1.0 / len(bits) for b in bits},
            flip_mode=FlipMode.FLIP,
        )
    if name == "cacheline_row":
        return ErrorSignature(
            name="cacheline_row",
            spatial=Spatial(kind="row"),
            bit_pmf={15: 0.20, 14: 0.35, 13: 0.25, 12: 0.12, 11: 0.05, 10: 0.03},
            flip_mode=FlipMode.FLIP,
        )
    raise ValueError(f"unknown archetype {name!r}; choose from {ARCHETYPES}")


def sample_signature(sigs: list[ErrorSignature], rng: np.random.Generator) -> ErrorSignature:
    """Weighted draw over a signature list."""
    if not sigs:
        raise ValueError("no signatures to sample from")
    w = np.array([s.weight for s in sigs], dtype=np.float64)
    return sigs[int(rng.choice(len(sigs), p=w / w.sum()))]


# ── bit remapping onto target formats ────────────────────────────────


def _field_of(bit: int, spec: FormatSpec) -> tuple[str, int, int]:
    """(field name, offset of bit from the field MSB, field width)."""
    sign = spec.width - 1
    exp_msb = spec.width - 2
    if bit == sign:
        return "sign", 0, 1
    if bit > spec.man_bits - 1:
        return "exp", exp_msb - bit, spec.exp_bits
    return "man", spec.man_bits - 1 - bit, spec.man_bits


def remap_bit(ref_bit: int, target: FormatSpec) -> int:
    """Reference-layout bit position mapped onto the target format.

    The bit keeps its field (sign, exponent, mantissa) and its relative
    position from the field's MSB, rescaled to the target field width and
    rounded to nearest with ties to even.
    """
    if not 0 <= ref_bit < REF_LAYOUT.width:
        raise ValueError(f"reference bit {ref_bit} out of range")
    name, i, w_ref = _field_of(ref_bit, REF_LAYOUT)
    if name == "sign":
        return target.width - 1
    if name == "exp":
        w_t, msb_t = target.exp_bits, target.width - 2
    else:
        w_t, msb_t = target.man_bits, target.man_bits - 1
    j = 0 if w_ref == 1 else int(round(i * (w_t - 1) / (w_ref - 1)))
    j = min(j, w_t - 1)
    return msb_t - j


def sample_bits(sig: ErrorSignature, target: FormatSpec, rng: np.random.Generator) -> list[int]:
    """Bit positions for one corrupted element in the target format.

    Multiplicity picks how many reference bits are hit; they are drawn
    without replacement from the signature's pmf and remapped.  Remap
    collisions (narrow targets fold neighboring bits together) reduce the
    effective count.
    """
    ms = sorted(sig.multiplicity)
    pm = np.array([sig.multiplicity[m] for m in ms], dtype=np.float64)
    m = int(ms[int(rng.choice(len(ms), p=pm / pm.sum()))])
    bits = sorted(sig.bit_pmf)
    pb = np.array([sig.bit_pmf[b] for b in bits], dtype=np.float64)
    m = min(m, int((pb > 0).sum()))
    chosen = rng.choice(len(bits), size=m, replace=False, p=pb / pb.sum())
    remapped = {remap_bit(bits[int(c)], target) for c in chosen}
    return sorted(remapped)


# ── spatial planning inside one tile ─────────────────────────────────


@dataclass
class CorruptionPlan:
    """Element coordinates (tile-relative) and per-element target bits."""

    rows: np.ndarray
    cols: np.ndarray
    bits: list[list[int]]
    mode: FlipMode

    def __len__(self) -> int:
        return len(self.rows)


def _footprint(spatial: Spatial, tile_h: int, tile_w: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if spatial.kind == "patch":
        ph, pw = min(spatial.h, tile_h), min(spatial.w, tile_w)
        r0 = int(rng.integers(0, tile_h - ph + 1))
        c0 = int(rng.integers(0, tile_w - pw + 1))
        rr, cc = np.meshgrid(np.arange(r0, r0 + ph), np.arange(c0, c0 + pw), indexing="ij")
        return rr.ravel(), cc.ravel()
    if spatial.kind == "scattered":
        k = min(spatial.k, tile_h * tile_w)
        flat = rng.choice(tile_h * tile_w, size=k, replace=False)
        return flat // tile_w, flat % tile_w
    if spatial.kind == "row":
        r = int(rng.integers(0, tile_h))
        return np.full(tile_w, r), np.arange(tile_w)
    c = int(rng.integers(0, tile_w))
    return np.arange(tile_h), np.full(tile_h, c)


def plan_corruption(
    sig: ErrorSignature,
    tile_h: int,
    tile_w: int,
    density: float,
    target: FormatSpec,
    rng: np.random.Generator,
) -> CorruptionPlan:
    """Choose which tile elements a fault activation corrupts, and how.

    At density 1 the full footprint is hit; lower densities subsample it,
    but never below one element.
    """
    if not 0 < density <= 1.0:
        raise ValueError("density must be in (0, 1]")
    if tile_h < 1 or tile_w < 1:
        raise ValueError("tile must be non-empty")
    rows, cols = _footprint(sig.spatial, tile_h, tile_w, rng)
    base = len(rows)
    n = max(1, int(round(density * base)))
    if n < base:
        keep = rng.choice(base, size=n, replace=False)
        keep.sort()
        rows, cols = rows[keep], cols[keep]
    bits = [sample_bits(sig, target, rng) for _ in range(len(rows))]
    return CorruptionPlan(rows=rows, cols=cols, bits=bits, mode=FlipMode(sig.flip_mode))
