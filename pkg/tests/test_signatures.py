"""Signature serialization, bit remapping and spatial planning tests.

The remap tables below were derived by hand from the field-anchored rule
(offset from field MSB, rescaled by (target_width-1)/(ref_width-1),
ties to even) and are frozen as the oracle.
"""

import json

import numpy as np
import pytest

from prism.signatures import (
    ARCHETYPES,
    DEFAULT_MULTIPLICITY,
    CorruptionPlan,
    ErrorSignature,
    Spatial,
    load_signatures,
    plan_corruption,
    remap_bit,
    sample_bits,
    sample_signature,
    save_signatures,
    synth_archetype,
)
from prism.softfp import BF16, FP8_E4M3, FP8_E5M2, FP16, FlipMode

# ref bit -> target bit, hand-derived; ref layout: sign 15, exp 14..10, man 9..0
REMAP_BF16 = {15: 15, 14: 14, 13: 12, 12: 10, 11: 9, 10: 7,
              9: 6, 8: 5, 7: 5, 6: 4, 5: 3, 4: 3, 3: 2, 2: 1, 1: 1, 0: 0}
REMAP_E4M3 = {15: 7, 14: 6, 13: 5, 12: 4, 11: 4, 10: 3,
              9: 2, 8: 2, 7: 2, 6: 1, 5: 1, 4: 1, 3: 1, 2: 0, 1: 0, 0: 0}
REMAP_E5M2 = {15: 7, 14: 6, 13: 5, 12: 4, 11: 3, 10: 2,
              9: 1, 8: 1, 7: 1, 6: 1, 5: 1, 4: 0, 3: 0, 2: 0, 1: 0, 0: 0}


class TestRemap:
    def test_fp16_is_identity(self):
        for b in range(16):
            assert remap_bit(b, FP16) == b

    @pytest.mark.parametrize("spec,table", [
        (BF16, REMAP_BF16), (FP8_E4M3, REMAP_E4M3), (FP8_E5M2, REMAP_E5M2),
    ])
    def test_frozen_tables(self, spec, table):
        got = {b: remap_bit(b, spec) for b in range(16)}
        assert got == table

    def test_fields_preserved(self):
        # a sign bit stays the sign bit, exponent stays exponent, etc.
        for spec in (BF16, FP8_E4M3, FP8_E5M2):
            assert remap_bit(15, spec) == spec.width - 1
            for b in range(10, 15):
                j = remap_bit(b, spec)
                assert spec.man_bits <= j < spec.width - 1
            for b in range(10):
                assert remap_bit(b, spec) < spec.man_bits

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            remap_bit(16, FP16)
        with pytest.raises(ValueError):
            remap_bit(-1, FP16)


class TestValidation:
    def _sig(self, **kw):
        base = dict(
            name="t", spatial=Spatial(kind="row"), bit_pmf={14: 1.0},
            multiplicity={1: 1.0}, flip_mode=FlipMode.FLIP, weight=1.0,
        )
        base.update(kw)
        return ErrorSignature(**base)

    def test_good(self):
        self._sig().validate()

    def test_pmf_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sums to"):
            self._sig(bit_pmf={14: 0.5, 13: 0.4}).validate()

    def test_bit_out_of_layout(self):
        with pytest.raises(ValueError, match="outside"):
            self._sig(bit_pmf={16: 1.0}).validate()

    def test_bad_kind(self):
        with pytest.raises(ValueError, match="kind"):
            self._sig(spatial=Spatial(kind="blob")).validate()

    def test_bad_multiplicity_key(self):
        with pytest.raises(ValueError, match="multiplicity"):
            self._sig(multiplicity={0: 1.0}).validate()

    def test_bad_weight(self):
        with pytest.raises(ValueError, match="weight"):
            self._sig(weight=0.0).validate()


class TestJsonl:
    def test_roundtrip(self, tmp_path):
        sigs = [synth_archetype(n) for n in ARCHETYPES]
        p = tmp_path / "sigs.jsonl"
        save_signatures(p, sigs)
        back = load_signatures(p)
        assert back == sigs

    def test_comments_and_blanks_skipped(self, tmp_path):
        p = tmp_path / "sigs.jsonl"
        body = json.dumps(synth_archetype("cacheline_row").to_json())
        p.write_text(f"# comment\n\n{body}\n")
        assert len(load_signatures(p)) == 1

    def test_error_carries_line_number(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        good = json.dumps(synth_archetype("cacheline_row").to_json())
        p.write_text(good + "\n{not json\n")
        with pytest.raises(ValueError, match=r":2:"):
            load_signatures(p)

    def test_invalid_signature_line_flagged(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        obj = synth_archetype("cacheline_row").to_json()
        obj["bit_pmf"] = {"14": 0.5}
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValueError, match=r":1:"):
            load_signatures(p)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("# nothing\n")
        with pytest.raises(ValueError, match="no signatures"):
            load_signatures(p)


class TestArchetypes:
    def test_patch3x3(self):
        sig = synth_archetype("patch3x3")
        assert sig.spatial == Spatial(kind="patch", h=3, w=3)
        assert sig.multiplicity == {1: 1.0}
        assert sig.flip_mode is FlipMode.STUCK1
        (bit, p), = sig.bit_pmf.items()
        assert p == 1.0
        assert 10 <= bit <= 14  # an exponent bit of the reference layout

    def test_patch3x3_deterministic_default(self):
        assert synth_archetype("patch3x3") == synth_archetype("patch3x3")

    def test_patch3x3_rng_selects_bit(self):
        bits = {next(iter(synth_archetype("patch3x3", np.random.default_rng(s)).bit_pmf))
                for s in range(40)}
        assert len(bits) > 1
        assert bits <= set(range(10, 15))

    def test_fma_sporadic(self):
        sig = synth_archetype("fma_sporadic")
        assert sig.spatial == Spatial(kind="scattered", k=4)
        assert set(sig.bit_pmf) == set(range(8)) | {10, 11}
        assert all(abs(p - 0.1) < 1e-12 for p in sig.bit_pmf.values())
        assert sig.multiplicity == DEFAULT_MULTIPLICITY

    def test_cacheline_row(self):
        sig = synth_archetype("cacheline_row")
        assert sig.spatial.kind == "row"
        assert set(sig.bit_pmf) == {15, 14, 13, 12, 11, 10}
        assert abs(sum(sig.bit_pmf.values()) - 1.0) < 1e-12

    def test_all_validate(self):
        for name in ARCHETYPES:
            synth_archetype(name).validate()

    def test_unknown(self):
        with pytest.raises(ValueError, match="archetype"):
            synth_archetype("nope")


class TestSampleSignature:
    def test_weighted(self):
        a = synth_archetype("patch3x3")
        b = ErrorSignature(name="heavy", spatial=Spatial(kind="row"),
                           bit_pmf={14: 1.0}, multiplicity={1: 1.0}, weight=9.0)
        rng = np.random.default_rng(0)
        picks = [sample_signature([a, b], rng).name for _ in range(2000)]
        frac_heavy = picks.count("heavy") / len(picks)
        assert abs(frac_heavy - 0.9) < 0.03

    def test_empty(self):
        with pytest.raises(ValueError):
            sample_signature([], np.random.default_rng(0))


class TestSampleBits:
    def test_point_mass(self):
        sig = synth_archetype("patch3x3")
        bit = next(iter(sig.bit_pmf))
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert sample_bits(sig, FP16, rng) == [bit]

    def test_multiplicity_distribution(self):
        sig = synth_archetype("fma_sporadic")
        rng = np.random.default_rng(2)
        counts = np.array([len(sample_bits(sig, FP16, rng)) for _ in range(10_000)])
        for m, p in DEFAULT_MULTIPLICITY.items():
            assert abs((counts == m).mean() - p) < 0.02

    def test_remap_collisions_reduce_count(self):
        # ref mantissa bits 0..2 all fold onto E4M3 bit 0
        sig = ErrorSignature(name="fold", spatial=Spatial(kind="row"),
                             bit_pmf={0: 1 / 3, 1: 1 / 3, 2: 1 / 3},
                             multiplicity={3: 1.0})
        rng = np.random.default_rng(3)
        assert sample_bits(sig, FP8_E4M3, rng) == [0]
        assert len(sample_bits(sig, FP16, rng)) == 3

    def test_marginal_matches_pmf(self):
        # 10k activations; total-variation distance to the stated pmf
        sig = synth_archetype("fma_sporadic")
        rng = np.random.default_rng(4)
        hits = np.zeros(16)
        n = 10_000
        total = 0
        for _ in range(n):
            for b in sample_bits(sig, FP16, rng):
                hits[b] += 1
                total += 1
        emp = hits / total
        ref = np.zeros(16)
        for b, p in sig.bit_pmf.items():
            ref[b] = p
        tv = 0.5 * np.abs(emp - ref).sum()
        assert tv <= 0.05


class TestPlanCorruption:
    def test_patch_full_density(self):
        sig = synth_archetype("patch3x3")
        rng = np.random.default_rng(5)
        for _ in range(50):
            plan = plan_corruption(sig, 16, 16, 1.0, FP16, rng)
            assert len(plan) == 9
            assert plan.rows.min() >= 0 and plan.rows.max() < 16
            assert plan.cols.min() >= 0 and plan.cols.max() < 16
            assert plan.rows.max() - plan.rows.min() == 2
            assert plan.cols.max() - plan.cols.min() == 2
            # every element carries the same single stuck bit
            assert all(b == plan.bits[0] for b in plan.bits)
            assert plan.mode is FlipMode.STUCK1

    def test_patch_anchor_varies(self):
        sig = synth_archetype("patch3x3")
        rng = np.random.default_rng(6)
        anchors = {(int(plan.rows.min()), int(plan.cols.min()))
                   for plan in (plan_corruption(sig, 16, 16, 1.0, FP16, rng) for _ in range(300))}
        assert len(anchors) > 50

    def test_patch_clipped_tile(self):
        sig = synth_archetype("patch3x3")
        plan = plan_corruption(sig, 2, 16, 1.0, FP16, np.random.default_rng(7))
        assert len(plan) == 6  # 2x3 after clipping

    def test_scattered_density(self):
        sig = synth_archetype("fma_sporadic")
        rng = np.random.default_rng(8)
        assert len(plan_corruption(sig, 16, 16, 1.0, FP16, rng)) == 4
        assert len(plan_corruption(sig, 16, 16, 0.5, FP16, rng)) == 2
        assert len(plan_corruption(sig, 16, 16, 0.01, FP16, rng)) == 1

    def test_scattered_positions_distinct(self):
        sig = synth_archetype("fma_sporadic")
        rng = np.random.default_rng(9)
        plan = plan_corruption(sig, 4, 4, 1.0, FP16, rng)
        keys = set(zip(plan.rows.tolist(), plan.cols.tolist()))
        assert len(keys) == len(plan)

    def test_row_and_column(self):
        row_sig = synth_archetype("cacheline_row")
        rng = np.random.default_rng(10)
        plan = plan_corruption(row_sig, 16, 12, 1.0, FP16, rng)
        assert len(plan) == 12
        assert len(set(plan.rows.tolist())) == 1
        assert sorted(plan.cols.tolist()) == list(range(12))

        col_sig = ErrorSignature(name="c", spatial=Spatial(kind="column"),
                                 bit_pmf={14: 1.0}, multiplicity={1: 1.0})
        plan = plan_corruption(col_sig, 9, 16, 1.0, FP16, rng)
        assert len(plan) == 9
        assert len(set(plan.cols.tolist())) == 1

    def test_density_bounds(self):
        sig = synth_archetype("patch3x3")
        with pytest.raises(ValueError):
            plan_corruption(sig, 16, 16, 0.0, FP16, np.random.default_rng(0))
        with pytest.raises(ValueError):
            plan_corruption(sig, 16, 16, 1.5, FP16, np.random.default_rng(0))

    def test_never_below_one_element(self):
        sig = synth_archetype("cacheline_row")
        plan = plan_corruption(sig, 16, 16, 0.001, FP16, np.random.default_rng(11))
        assert len(plan) == 1
