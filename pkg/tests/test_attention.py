import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusioncim.attention import (
    ExpUnit,
    OnlineSoftmaxState,
    PsumQuantizer,
    ScoreGen,
    TraceError,
    count_rescales,
    exact_attention,
    generate_scores,
    online_step,
    quantize_psum,
    read_trace,
    row_limits,
    streamed_attention,
    streamed_attention_qkv,
    taylor_exp,
    write_trace,
)
from fusioncim.scheduler import TraversalOrder

GOLDEN = Path(__file__).parent / "golden"


def fold_rows(scores, v, seqs, exp_unit=None):
    """Reference streamed attention: literal fold of online_step per row."""
    r = scores.shape[0]
    out = np.zeros((r, v.shape[1]))
    rescales = np.zeros(r, dtype=int)
    for i, seq in enumerate(seqs):
        state = OnlineSoftmaxState()
        for j in seq:
            state = online_step(state, scores[i, j], v[j], exp_unit)
        out[i] = state.o / state.l
        rescales[i] = state.rescale_count
    return out, rescales


def brute_rescales(scores, seqs):
    """Independent rescale oracle: per-row scalar prefix-max walk."""
    counts = []
    for i, seq in enumerate(seqs):
        m = -math.inf
        c = 0
        for t, j in enumerate(seq):
            if scores[i, j] > m:
                if t > 0:
                    c += 1
                m = scores[i, j]
        counts.append(c)
    return np.array(counts)


class TestExactAttention:
    def test_single_score_softmax_is_identity(self):
        q = np.array([[1.0, 2.0]])
        k = np.array([[0.5, -1.0]])
        v = np.array([[3.0, 4.0]])
        assert np.array_equal(exact_attention(q, k, v, causal=True), v)

    def test_identical_keys_average_valid_prefix(self):
        rng = np.random.default_rng(0)
        d, n = 8, 12
        q = rng.normal(size=(5, d))
        k = np.tile(rng.normal(size=(1, d)), (n, 1))
        v = rng.normal(size=(n, d))
        out = exact_attention(q, k, v, causal=True)
        offset = n - 5
        for i in range(5):
            np.testing.assert_allclose(out[i], v[: i + offset + 1].mean(axis=0), atol=1e-12)

    def test_golden_high_precision(self):
        doc = json.loads((GOLDEN / "exact_attention_r4n16d8.json").read_text())
        q, k, v = map(np.array, (doc["q"], doc["k"], doc["v"]))
        got = exact_attention(q, k, v, causal=True)
        np.testing.assert_allclose(got, np.array(doc["expected_causal"]), atol=1e-12)
        got = exact_attention(q, k, v, causal=False)
        np.testing.assert_allclose(got, np.array(doc["expected_full"]), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            exact_attention(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros((4, 3)))


class TestOnlineStep:
    def test_first_step(self):
        st0 = OnlineSoftmaxState()
        v = np.array([1.0, -2.0])
        st1 = online_step(st0, 3.5, v)
        assert st1.m == 3.5 and st1.l == 1.0
        assert np.array_equal(st1.o, v)
        assert st1.rescale_count == 0 and st1.steps == 1

    def test_lower_score_no_rescale(self):
        st1 = online_step(OnlineSoftmaxState(), 5.0, np.array([1.0]))
        st2 = online_step(st1, 3.0, np.array([0.0]))
        assert st2.rescale_count == 0
        assert st2.l == pytest.approx(1.0 + math.exp(-2.0), rel=0, abs=1e-15)

    def test_monotone_streams(self):
        v = np.array([1.0])
        state = OnlineSoftmaxState()
        for s in [1.0, 2.0, 3.0, 4.0]:
            state = online_step(state, s, v)
        assert state.rescale_count == 3
        state = OnlineSoftmaxState()
        for s in [4.0, 3.0, 2.0, 1.0]:
            state = online_step(state, s, v)
        assert state.rescale_count == 0

    def test_masked_input_rejected(self):
        with pytest.raises(ValueError):
            online_step(OnlineSoftmaxState(), -math.inf, np.array([1.0]))

    def test_order_independent_m_and_l(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=10)
        v = np.zeros(1)
        final = []
        for perm in (np.arange(10), rng.permutation(10)):
            state = OnlineSoftmaxState()
            for j in perm:
                state = online_step(state, scores[j], v)
            final.append((state.m, state.l))
        assert final[0][0] == final[1][0]
        assert final[0][1] == pytest.approx(final[1][1], rel=1e-12)
        assert final[0][0] == scores.max()
        assert final[0][1] == pytest.approx(np.exp(scores - scores.max()).sum(), rel=1e-12)


class TestStreamedAttention:
    @pytest.mark.parametrize("order", ["forward", "reverse", "random"])
    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_exact(self, order, causal):
        rng = np.random.default_rng(9)
        r, n, d = 6, 40, 8
        q, k, v = rng.normal(size=(r, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
        if order == "random":
            order = TraversalOrder.random(r, n, causal, seed=5)
        out, _ = streamed_attention_qkv(q, k, v, order=order, causal=causal)
        np.testing.assert_allclose(out, exact_attention(q, k, v, causal=causal), atol=1e-6)

    def test_matches_scalar_fold(self):
        rng = np.random.default_rng(3)
        r, n, d = 5, 24, 4
        scores = rng.normal(size=(r, n))
        v = rng.normal(size=(n, d))
        order = TraversalOrder.random(r, n, causal=False, seed=11)
        got, stats = streamed_attention(scores, v, order=order)
        ref, resc = fold_rows(scores, v, order.rows)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-13)
        assert np.array_equal(stats.per_row, resc)

    def test_taylor8_within_budget(self):
        rng = np.random.default_rng(4)
        r, n, d = 4, 32, 8
        q, k, v = rng.normal(size=(r, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
        out, _ = streamed_attention_qkv(q, k, v, causal=True, exp_unit=ExpUnit("taylor8"))
        np.testing.assert_allclose(out, exact_attention(q, k, v, causal=True), atol=1e-3)

    def test_bad_order_rejected(self):
        scores = np.zeros((2, 4))
        with pytest.raises(ValueError, match="permutation"):
            streamed_attention(scores, None, order=[[0, 1, 1, 3], [0, 1, 2, 3]])
        with pytest.raises(ValueError, match="permutation"):
            streamed_attention(scores, None, order=[[0, 1], [0, 1, 2, 3]])

    def test_alibi_diagonal_first_zero_rescales(self):
        # Strongly dominant diagonal: gap 12 sigma; cross-checked by brute force.
        gen = ScoreGen(mode="alibi_like", seed=3, alibi_slope=12.0)
        s = generate_scores(gen, 256, 256, causal=True)
        _, stats = streamed_attention(s, None, order="reverse", causal=True)
        limits = row_limits(256, 256, True)
        seqs = [np.arange(lim - 1, -1, -1) for lim in limits]
        assert np.array_equal(stats.per_row, brute_rescales(s, seqs))
        assert stats.total_rescales == 0

    def test_alibi_forward_many_rescales_and_reduction(self):
        gen = ScoreGen(mode="alibi_like", seed=3, alibi_slope=12.0)
        s = generate_scores(gen, 256, 256, causal=True)
        _, fwd = streamed_attention(s, None, order="forward", causal=True)
        limits = row_limits(256, 256, True)
        seqs = [np.arange(lim) for lim in limits]
        assert np.array_equal(fwd.per_row, brute_rescales(s, seqs))
        assert fwd.total_rescales > 10000
        _, rev = streamed_attention(s, None, order="reverse", causal=True)
        reduction = 1 - rev.total_rescales / fwd.total_rescales
        assert reduction == 1.0

    def test_rescale_bounds_and_monotone_equality(self):
        rng = np.random.default_rng(8)
        s = rng.normal(size=(7, 33))
        _, stats = streamed_attention(s, None, order="forward")
        assert np.all(stats.per_row >= 0)
        assert np.all(stats.per_row <= stats.steps_per_row - 1)
        inc = np.sort(rng.normal(size=(1, 20)), axis=1)
        _, st2 = streamed_attention(inc, None, order="forward")
        assert st2.per_row[0] == 19  # strictly increasing forward: every step rescales

    def test_row_max_first_means_zero(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=(5, 16))
        first_max = [np.argsort(-s[i]).tolist() for i in range(5)]
        _, stats = streamed_attention(s, None, order=first_max)
        assert stats.total_rescales == 0

    def test_exp_op_accounting(self):
        rng = np.random.default_rng(12)
        s = rng.normal(size=(4, 30))
        _, stats = streamed_attention(s, None, order="forward")
        # One score exponential per accumulation step, one extra per rescale.
        assert stats.score_exps == stats.total_steps
        assert stats.exp_evals == stats.total_steps + stats.total_rescales

    def test_stats_only_matches_full(self):
        rng = np.random.default_rng(13)
        s = rng.normal(size=(6, 20))
        v = rng.normal(size=(20, 3))
        _, a = streamed_attention(s, v, order="reverse")
        out, b = streamed_attention(s, None, order="reverse")
        assert out is None
        assert np.array_equal(a.per_row, b.per_row)


@settings(max_examples=40, deadline=None)
@given(
    r=st.integers(1, 6), n=st.integers(1, 24), d=st.integers(1, 6),
    causal=st.booleans(), seed=st.integers(0, 2**16),
)
def test_order_invariance_property(r, n, d, causal, seed):
    if causal and r > n:
        n = r
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(r, d)), rng.normal(size=(n, d)), rng.normal(size=(n, d))
    ref = exact_attention(q, k, v, causal=causal)
    order = TraversalOrder.random(r, n, causal, seed=seed)
    out, _ = streamed_attention_qkv(q, k, v, order=order, causal=causal)
    np.testing.assert_allclose(out, ref, atol=1e-6)


class TestTaylorExp:
    def test_zero_exact(self):
        assert taylor_exp(0.0) == 1.0

    def test_minus_one(self):
        assert abs(taylor_exp(-1.0) - math.exp(-1)) / math.exp(-1) <= 1e-5

    def test_lut_times_fraction(self):
        lut = np.exp(-np.arange(17, dtype=np.float64))
        got = taylor_exp(-3.5)
        frac = sum((-0.5) ** j / math.factorial(j) for j in range(9))
        assert got == pytest.approx(lut[3] * frac, rel=1e-12)
        assert abs(got - math.exp(-3.5)) / math.exp(-3.5) <= 1e-5

    def test_dense_sweep(self):
        x = -np.arange(0.0, 16.0 + 1e-9, 1e-3)
        rel = np.abs(taylor_exp(x) - np.exp(x)) / np.exp(x)
        assert rel.max() <= 1e-5

    def test_underflow_saturates_to_zero(self):
        assert taylor_exp(-17.0) == 0.0
        unit = ExpUnit("taylor8")
        assert unit(-20.0) == 0.0
        assert unit.underflow_count == 1

    def test_positive_input_rejected(self):
        with pytest.raises(ValueError):
            taylor_exp(0.5)


class TestPsumQuantizer:
    def test_zero_row(self):
        q = PsumQuantizer(bits=8)
        row, scale = quantize_psum(np.zeros(8), 0.0, q)
        assert np.array_equal(row, np.zeros(8)) and scale == 0.0

    def test_unit_scale_step(self):
        q = PsumQuantizer(bits=8)
        row = np.array([1.0, 0.5, -1.0, 1 / 254.0])
        out, scale = quantize_psum(row, 0.0, q)
        assert scale == 1.0
        step = 1.0 / 127
        assert out[0] == pytest.approx(1.0)
        assert out[2] == pytest.approx(-1.0)
        # 0.5/step = 63.5 -> round-half-even -> 64
        assert out[1] == pytest.approx(64 * step)
        # 1/254 = exactly 0.5 steps -> even -> 0
        assert out[3] == 0.0

    def test_scale_only_grows(self):
        q = PsumQuantizer(bits=8)
        _, s1 = quantize_psum(np.array([2.0]), 0.0, q)
        _, s2 = quantize_psum(np.array([1.0]), s1, q)
        assert s2 == s1 == 2.0

    def test_disabled_bit_exact(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=(3, 17))
        v = rng.normal(size=(17, 4))
        a, _ = streamed_attention(s, v, quantizer=None)
        b, _ = streamed_attention(s, v, quantizer=PsumQuantizer(enabled=False))
        assert np.array_equal(a, b)

    def test_streamed_error_within_frozen_budget(self):
        doc = json.loads((GOLDEN / "psum_quantizer_error.json").read_text())
        rng = np.random.default_rng(doc["seed"])
        scores = rng.normal(size=(doc["r"], doc["n"]))
        v = rng.normal(size=(doc["n"], doc["d"]))
        ref, _ = streamed_attention(scores, v)
        quant, _ = streamed_attention(scores, v, quantizer=PsumQuantizer(bits=doc["bits"]))
        err = np.linalg.norm(quant - ref) / np.linalg.norm(ref)
        assert err == pytest.approx(doc["measured_rel_frobenius_error"], rel=1e-6)
        assert err < 0.05


class TestGenerateScores:
    def test_alibi_dominant_diagonal_argmax(self):
        s = generate_scores(ScoreGen(mode="alibi_like", seed=0, alibi_slope=10.0), 64, 64)
        finite = np.where(np.isfinite(s), s, -np.inf)
        assert np.array_equal(np.argmax(finite, axis=1), np.arange(64))

    def test_deterministic(self):
        g = ScoreGen(mode="uniform", seed=77)
        a = generate_scores(g, 32, 48, causal=False)
        b = generate_scores(g, 32, 48, causal=False)
        assert np.array_equal(a, b)

    def test_causal_mask_is_minus_inf(self):
        s = generate_scores(ScoreGen(seed=1), 8, 8)
        assert np.all(np.isinf(s[np.triu_indices(8, k=1)]))

    def test_rope_defaults_argmax_near_diagonal(self):
        # Calibration readout: fraction of rows whose maximum sits within one
        # tile (128) of the diagonal under the default locality bump.
        n = 1024
        s = generate_scores(ScoreGen(mode="rope_like", seed=0), n, n)
        finite = np.where(np.isfinite(s), s, -np.inf)
        am = np.argmax(finite, axis=1)
        frac = np.mean((np.arange(n) - am) <= 128)
        assert frac > 0.8


class TestCountRescales:
    @pytest.mark.parametrize("order", ["forward", "reverse"])
    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_streamed(self, order, causal):
        rng = np.random.default_rng(21)
        s = rng.normal(size=(30, 50))
        if causal:
            mask = np.arange(50)[None, :] > (np.arange(30)[:, None] + 20)
            s[mask] = -np.inf
        _, stats = streamed_attention(s, None, order=order, causal=causal)
        assert np.array_equal(count_rescales(s, order, causal=causal), stats.per_row)

    def test_explicit_order_matches_brute(self):
        rng = np.random.default_rng(22)
        s = rng.normal(size=(5, 12))
        order = TraversalOrder.random(5, 12, causal=False, seed=9)
        got = count_rescales(s, order, causal=False)
        assert np.array_equal(got, brute_rescales(s, order.rows))


class TestTraceIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        s = rng.normal(size=(8, 8)).astype(np.float32)
        p = tmp_path / "t.trace"
        write_trace(p, s, causal=False)
        got, causal = read_trace(p)
        assert causal is False
        assert got.dtype == np.float32
        assert got.tobytes() == s.tobytes()

    def test_header_payload_mismatch(self, tmp_path):
        p = tmp_path / "bad.trace"
        header = json.dumps({"rows": 4, "cols": 4, "dtype": "f32le", "causal": False})
        p.write_bytes(header.encode() + b"\n" + b"\x00" * (4 * 4 * 4 - 8))
        with pytest.raises(TraceError, match="truncated"):
            read_trace(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.trace"
        p.write_bytes(b"not json\n" + b"\x00" * 16)
        with pytest.raises(TraceError, match="header"):
            read_trace(p)

    def test_external_dump_checksum(self, tmp_path):
        # Simulated external model-dump: hand-packed header + payload.
        rng = np.random.default_rng(99)
        rows, cols = 5, 9
        values = rng.normal(size=(rows, cols)).astype("<f4")
        payload = struct.pack(f"<{rows * cols}f", *values.ravel().tolist())
        checksum = hashlib.sha256(payload).hexdigest()
        p = tmp_path / "dump.trace"
        with open(p, "wb") as fh:
            fh.write(b'{"rows":5,"cols":9,"dtype":"f32le","causal":true}\n')
            fh.write(payload)
        got, causal = read_trace(p)
        assert causal is True
        assert got.shape == (rows, cols)
        assert hashlib.sha256(got.tobytes()).hexdigest() == checksum
