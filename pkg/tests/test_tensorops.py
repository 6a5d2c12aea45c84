"""Tests for prism.tensorops.

Every backward is checked against a central finite-difference oracle on
wide (float64) inputs; quantization is checked against the softfp
encode/decode pair.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from prism.softfp import BF16, FP8_E4M3, FP8_E5M2, FP16, decode_array, encode_array
from prism.tensorops import (
    ScaleState,
    cross_entropy_bwd,
    cross_entropy_fwd,
    dp_average,
    embedding_bwd,
    embedding_fwd,
    gelu_bwd,
    gelu_fwd,
    jit_scale,
    layernorm_bwd,
    layernorm_fwd,
    matmul_bwd,
    matmul_fwd,
    quantize,
    softmax_bwd,
    softmax_fwd,
)

N_TRIALS = 10
FD_H = 1e-4
FD_TOL = 1e-4


def fd_grad(f, x, h=FD_H):
    """Central finite differences of a scalar function w.r.t. array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return np.linalg.norm((a - b).ravel()) / denom


# ── kernels: forward values ──────────────────────────────────────────


class TestForwardValues:
    def test_matmul(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(matmul_fwd(a, b), a @ b)

    def test_layernorm_normalizes_last_axis(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 16)) * 3 + 1
        y, _ = layernorm_fwd(x, np.ones(16), np.zeros(16), eps=1e-5)
        assert np.allclose(y.mean(axis=-1), 0, atol=1e-12)
        assert np.allclose(y.var(axis=-1), 1, atol=1e-3)

    def test_gelu_fixed_points(self):
        x = np.array([0.0, 100.0, -100.0])
        y = gelu_fwd(x)
        assert y[0] == 0.0
        assert y[1] == pytest.approx(100.0)
        assert y[2] == pytest.approx(0.0, abs=1e-12)
        # tanh approximation value at 1.0
        assert gelu_fwd(np.array([1.0]))[0] == pytest.approx(0.841192, abs=1e-6)

    def test_softmax_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 9))
        p = softmax_fwd(x)
        assert np.allclose(p.sum(axis=-1), 1.0)
        assert np.allclose(softmax_fwd(x + 123.0), p)

    def test_softmax_propagates_nonfinite(self):
        p = softmax_fwd(np.array([[0.0, np.nan, 1.0]]))
        assert np.isnan(p).any()
        p = softmax_fwd(np.array([[0.0, np.inf, 1.0]]))
        assert not np.isfinite(p).all()

    def test_embedding_lookup(self):
        table = np.arange(12.0).reshape(4, 3)
        ids = np.array([[0, 3], [3, 1]])
        out = embedding_fwd(table, ids)
        assert out.shape == (2, 2, 3)
        assert np.array_equal(out[0, 1], table[3])

    def test_cross_entropy_uniform_logits_is_log_vocab(self):
        """Uniform logits over V classes cost exactly ln V nats."""
        for v in (7, 256, 259):
            logits = np.zeros((5, v))
            targets = np.arange(5) % v
            loss, _ = cross_entropy_fwd(logits, targets)
            assert loss == pytest.approx(math.log(v), rel=1e-12)

    def test_cross_entropy_is_mean_over_positions(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((8, 11))
        targets = rng.integers(0, 11, size=8)
        loss, probs = cross_entropy_fwd(logits, targets)
        per_pos = -np.log(probs[np.arange(8), targets])
        assert loss == pytest.approx(per_pos.mean(), rel=1e-12)

    def test_cross_entropy_nan_logits_gives_nan_loss(self):
        logits = np.zeros((3, 5))
        logits[1, 2] = np.nan
        loss, _ = cross_entropy_fwd(logits, np.zeros(3, dtype=int))
        assert math.isnan(loss)


# ── kernels: backward vs finite differences ──────────────────────────


class TestBackwardFiniteDifferences:
    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_matmul(self, trial):
        rng = np.random.default_rng(100 + trial)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        r = rng.standard_normal((3, 5))
        da, db = matmul_bwd(r, a, b)
        assert rel_err(da, fd_grad(lambda: float((matmul_fwd(a, b) * r).sum()), a)) < FD_TOL
        assert rel_err(db, fd_grad(lambda: float((matmul_fwd(a, b) * r).sum()), b)) < FD_TOL

    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_matmul_batched(self, trial):
        rng = np.random.default_rng(200 + trial)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        r = rng.standard_normal((2, 3, 5))
        da, db = matmul_bwd(r, a, b)
        assert rel_err(da, fd_grad(lambda: float((matmul_fwd(a, b) * r).sum()), a)) < FD_TOL
        assert rel_err(db, fd_grad(lambda: float((matmul_fwd(a, b) * r).sum()), b)) < FD_TOL

    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_layernorm(self, trial):
        rng = np.random.default_rng(300 + trial)
        x = rng.standard_normal((4, 8)) * 2 + 0.5
        gain = rng.standard_normal(8) * 0.5 + 1
        bias = rng.standard_normal(8) * 0.1
        r = rng.standard_normal((4, 8))

        def loss():
            y, _ = layernorm_fwd(x, gain, bias)
            return float((y * r).sum())

        _, cache = layernorm_fwd(x, gain, bias)
        dx, dg, db = layernorm_bwd(r, cache)
        assert rel_err(dx, fd_grad(loss, x)) < FD_TOL
        assert rel_err(dg, fd_grad(loss, gain)) < FD_TOL
        assert rel_err(db, fd_grad(loss, bias)) < FD_TOL

    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_gelu(self, trial):
        rng = np.random.default_rng(400 + trial)
        x = rng.standard_normal((3, 7)) * 2
        r = rng.standard_normal((3, 7))
        dx = gelu_bwd(r, x)
        assert rel_err(dx, fd_grad(lambda: float((gelu_fwd(x) * r).sum()), x)) < FD_TOL

    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_softmax(self, trial):
        rng = np.random.default_rng(500 + trial)
        x = rng.standard_normal((4, 6))
        r = rng.standard_normal((4, 6))
        p = softmax_fwd(x)
        dx = softmax_bwd(r, p)
        assert rel_err(dx, fd_grad(lambda: float((softmax_fwd(x) * r).sum()), x)) < FD_TOL

    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_embedding(self, trial):
        rng = np.random.default_rng(600 + trial)
        table = rng.standard_normal((7, 4))
        ids = rng.integers(0, 7, size=(2, 5))
        r = rng.standard_normal((2, 5, 4))
        dt = embedding_bwd(r, ids, n_rows=7)
        assert rel_err(
            dt, fd_grad(lambda: float((embedding_fwd(table, ids) * r).sum()), table)
        ) < FD_TOL

    @pytest.mark.parametrize("trial", range(N_TRIALS))
    def test_cross_entropy(self, trial):
        rng = np.random.default_rng(700 + trial)
        logits = rng.standard_normal((6, 9))
        targets = rng.integers(0, 9, size=6)

        def loss():
            val, _ = cross_entropy_fwd(logits, targets)
            return float(val)

        _, probs = cross_entropy_fwd(logits, targets)
        dl = cross_entropy_bwd(probs, targets)
        assert rel_err(dl, fd_grad(loss, logits)) < FD_TOL


# ── quantization ─────────────────────────────────────────────────────


class TestQuantize:
    def test_representable_fp16_values_are_fixed_points(self):
        rng = np.random.default_rng(8)
        bits = rng.integers(0, 1 << 16, size=2048).astype(np.uint16)
        vals = decode_array(bits, FP16)
        vals = vals[np.isfinite(vals)]
        assert np.array_equal(quantize(vals, FP16), vals)

    @pytest.mark.parametrize("spec", [FP16, BF16, FP8_E4M3, FP8_E5M2])
    def test_matches_encode_decode(self, spec):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(4096) * np.logspace(-6, 3, 4096)
        want = decode_array(encode_array(x, spec), spec)
        assert np.array_equal(quantize(x, spec), want)

    def test_preserves_dtype_and_shape(self):
        x = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
        q = quantize(x, BF16)
        assert q.dtype == np.float32 and q.shape == (3, 5)

    def test_scaled_quantize_round_trips_amax_region(self):
        rng = np.random.default_rng(10)
        x = (rng.standard_normal(1000) * 1e-3).astype(np.float32)
        s = jit_scale(x, FP8_E4M3)
        q = quantize(x, FP8_E4M3, s)
        # scaled values must land inside the format's finite range
        assert np.all(np.abs(q * s.scale) <= FP8_E4M3.max_finite)
        # and the relative error of the bulk should be small
        big = np.abs(x) > 1e-4
        assert np.max(np.abs((q[big] - x[big]) / x[big])) < 0.08

    def test_scaled_quantize_is_idempotent_under_fresh_scales(self):
        """Power-of-two scales make re-quantization with a recomputed scale
        the bitwise identity, which the hook contract relies on."""
        rng = np.random.default_rng(11)
        for dtype in (np.float32, np.float64):
            x = (rng.standard_normal(512) * 3e-2).astype(dtype)
            q1 = quantize(x, FP8_E5M2, jit_scale(x, FP8_E5M2))
            q2 = quantize(q1, FP8_E5M2, jit_scale(q1, FP8_E5M2))
            assert np.array_equal(q1, q2)

    def test_jit_scale_is_power_of_two_and_sound(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal(100) * 0.02
        s = jit_scale(x, FP8_E4M3)
        frac, _ = math.frexp(s.scale)
        assert frac == 0.5  # exact power of two
        amax = float(np.max(np.abs(x)))
        assert amax * s.scale <= FP8_E4M3.max_finite < 2 * amax * s.scale
        assert s.amax == amax

    def test_jit_scale_degenerate_inputs(self):
        assert jit_scale(np.zeros(4), FP8_E4M3).scale == 1.0
        assert jit_scale(np.array([np.nan, np.inf]), FP8_E4M3).scale == 1.0
        # non-finite entries are ignored for amax
        s = jit_scale(np.array([np.inf, 0.01]), FP8_E4M3)
        assert s.amax == 0.01

    def test_nonfinite_values_pass_through(self):
        x = np.array([np.inf, -np.inf, np.nan, 1.0])
        q = quantize(x, FP16)
        assert q[0] == np.inf and q[1] == -np.inf and np.isnan(q[2]) and q[3] == 1.0
        q = quantize(x, FP8_E5M2, ScaleState(amax=1.0, scale=2.0))
        assert q[0] == np.inf and np.isnan(q[2])


# ── data-parallel averaging ──────────────────────────────────────────


class TestDpAverage:
    def test_mean_of_identical_ranks_is_identity(self):
        rng = np.random.default_rng(13)
        g = {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal(5)}
        avg = dp_average([g, g, g, g])
        for k in g:
            assert np.array_equal(avg[k], g[k])

    def test_single_rank_perturbation_is_diluted_by_n(self):
        """One corrupted rank out of N shifts the average by delta/N."""
        rng = np.random.default_rng(14)
        n = 4
        g = {"w": rng.standard_normal((8, 8)), "b": rng.standard_normal(8)}
        delta = {k: rng.standard_normal(v.shape) for k, v in g.items()}
        ranks = [dict(g) for _ in range(n)]
        ranks[2] = {k: g[k] + delta[k] for k in g}
        avg = dp_average(ranks)
        for k in g:
            got = avg[k] - g[k]
            want = delta[k] / n
            assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-6

    def test_deterministic_reduction_order(self):
        rng = np.random.default_rng(15)
        gs = [{"w": rng.standard_normal(64)} for _ in range(4)]
        a = dp_average(gs)
        b = dp_average(gs)
        assert np.array_equal(a["w"], b["w"])


class TestFastRoundEquivalence:
    """The quantize shortcut must match round_array bitwise.

    round_array is itself pinned to the encode/decode pair elsewhere, so
    these checks chain the fast path back to the layout reference.  NaNs
    compare as equal; signed zeros must agree in sign.
    """

    FORMATS = (FP16, BF16, FP8_E4M3, FP8_E5M2)

    @staticmethod
    def assert_same(a, b):
        assert a.dtype == b.dtype
        assert np.array_equal(a, b, equal_nan=True)
        finite = np.isfinite(a)
        assert np.array_equal(np.signbit(a[finite]), np.signbit(b[finite]))

    def all_f16_values(self, dtype):
        bits = np.arange(1 << 16, dtype=np.uint16)
        with np.errstate(invalid="ignore"):
            return bits.view(np.float16).astype(dtype)

    @pytest.mark.parametrize("spec", FORMATS, ids=lambda s: s.name)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_exhaustive_f16_input_grid(self, spec, dtype):
        from prism.tensorops import _fast_round
        from prism.softfp import round_array

        x = self.all_f16_values(dtype)
        self.assert_same(_fast_round(x, spec), round_array(x, spec))

    @pytest.mark.parametrize("spec", FORMATS, ids=lambda s: s.name)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_random_wide_range(self, spec, dtype):
        from prism.tensorops import _fast_round
        from prism.softfp import round_array

        rng = np.random.default_rng(21)
        mag = rng.uniform(-50, 50, size=20000)
        x = (rng.standard_normal(20000) * np.exp2(mag)).astype(dtype)
        self.assert_same(_fast_round(x, spec), round_array(x, spec))

    @pytest.mark.parametrize("spec", FORMATS, ids=lambda s: s.name)
    def test_exact_midpoint_ties(self, spec):
        """Midpoints between consecutive representables round to even."""
        from prism.tensorops import _fast_round
        from prism.softfp import round_array

        enc = np.arange(1 << spec.width, dtype=np.uint16)
        with np.errstate(invalid="ignore"):
            vals = decode_array(enc, spec)
        pos = np.unique(vals[np.isfinite(vals) & (vals >= 0)])
        mids = (pos[:-1] + pos[1:]) * 0.5
        for x in (mids, -mids):
            self.assert_same(_fast_round(x, spec), round_array(x, spec))

    @pytest.mark.parametrize("spec", FORMATS, ids=lambda s: s.name)
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_specials_and_saturation_band(self, spec, dtype):
        from prism.tensorops import _fast_round
        from prism.softfp import round_array

        eps = np.spacing(dtype(spec.max_finite))
        with np.errstate(over="ignore"):
            x = self._special_band(spec, dtype, eps)
        with np.errstate(over="ignore", invalid="ignore"):
            self.assert_same(_fast_round(x, spec), round_array(x, spec))

    @staticmethod
    def _special_band(spec, dtype, eps):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.array(
                [
                    0.0,
                    -0.0,
                    np.inf,
                    -np.inf,
                    np.nan,
                    spec.max_finite,
                    -spec.max_finite,
                    spec.max_finite + eps,
                    spec.max_finite * 1.5,
                    spec.max_finite * 4.0,
                    -spec.max_finite * 4.0,
                    spec.min_normal,
                    spec.min_normal / 2,
                    spec.min_normal / 1024,
                ],
                dtype=dtype,
            )

    def test_quantize_uses_the_fast_values(self):
        rng = np.random.default_rng(22)
        x = rng.standard_normal(4096).astype(np.float32)
        for spec in self.FORMATS:
            scale = ScaleState(amax=1.0, scale=64.0) if spec.width == 8 else None
            q = quantize(x, spec, scale)
            dec = decode_array(encode_array(x * (scale.scale if scale else 1.0), spec), spec)
            ref = (dec / scale.scale if scale else dec).astype(np.float32)
            finite = np.isfinite(q)
            assert np.array_equal(q[finite], ref[finite])
