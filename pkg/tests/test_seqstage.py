import math

import numpy as np
import pytest

from seqpool import tensorcore as tc
from seqpool.errors import DimensionError, DomainError, FormatError
from seqpool.seqstage import (
    Dropout,
    SeqStageParams,
    StageNodes,
    approx_error,
    correction_term,
    describe,
    fnn_forward,
    pool,
    rnn_forward,
    transplant,
    truncated_rnn_forward,
)
from seqpool.tensorcore import RngStream

from helpers import check_gradients

SCALAR = SeqStageParams(np.array([[1.0]]), np.zeros(1), np.array([[0.5]]), np.zeros(1))


def random_params(r, d1=4, d2=3, ws_scale=1.0):
    return SeqStageParams(r.normal(size=(d2, d1)), r.normal(size=d2) * 0.5,
                          ws_scale * r.normal(size=(d2, d2)), r.normal(size=d2) * 0.5)


def no_recurrence(d):
    return SeqStageParams(np.eye(d), np.zeros(d), np.zeros((d, d)), np.zeros(d))


class TestRnn:
    def test_recurrence_disabled(self):
        out = rnn_forward(np.array([[3.0, -1.0], [2.0, 2.0]]), no_recurrence(2)).value
        np.testing.assert_array_equal(out, [[3.0, -1.0], [2.0, 2.0]])

    def test_scalar_unroll(self):
        out = rnn_forward(np.array([[1.0], [1.0]]), SCALAR).value[:, 0]
        assert out[0] == 1.0
        assert out[1] == pytest.approx(1.0 + 0.5 * math.tanh(1.0), abs=1e-15)
        assert out[1] == pytest.approx(1.380797, abs=1e-6)

    def test_single_step_has_no_recurrence(self, rng):
        p = random_params(rng)
        f = rng.normal(size=(1, 4))
        expect = p.W_i @ f[0] + p.b_i + p.b_s
        np.testing.assert_allclose(rnn_forward(f, p).value[0], expect, atol=1e-14)

    def test_matches_loop_oracle(self, rng):
        p = random_params(rng)
        f = rng.normal(size=(7, 4))
        r = np.zeros(3)
        ref = []
        for t in range(7):
            o = p.W_i @ f[t] + p.b_i + p.W_s @ r + p.b_s
            ref.append(o)
            r = np.tanh(o)
        np.testing.assert_allclose(rnn_forward(f, p).value, ref, atol=1e-12)

    def test_batched_matches_individual(self, rng):
        p = random_params(rng)
        seqs = rng.normal(size=(5, 3, 4))     # (T, n, d1)
        batched = rnn_forward(seqs, p).value
        for k in range(3):
            np.testing.assert_allclose(batched[:, k], rnn_forward(seqs[:, k], p).value, atol=1e-13)

    def test_errors(self, rng):
        p = random_params(rng)
        with pytest.raises(DimensionError):
            rnn_forward(rng.normal(size=(3, 5)), p)
        with pytest.raises(DomainError):
            rnn_forward(np.zeros((0, 4)), p)


class TestFnn:
    def test_equals_rnn_without_recurrent_weight(self, rng):
        p = random_params(rng)
        p.W_s[:] = 0
        p.b_i[:] = 0
        p.b_s[:] = 0
        f = rng.normal(size=(6, 4))
        np.testing.assert_allclose(fnn_forward(f, p).value, f @ p.W_i.T, atol=1e-14)
        np.testing.assert_array_equal(fnn_forward(f, p).value, rnn_forward(f, p).value)

    def test_scalar_closed_form(self):
        assert fnn_forward(np.array([[1.0]]), SCALAR).value[0, 0] == pytest.approx(1.380797, abs=1e-6)

    def test_closed_form_with_bias(self, rng):
        p = random_params(rng)
        f = rng.normal(size=(4, 4))
        h = f @ p.W_i.T + p.b_i
        np.testing.assert_allclose(fnn_forward(f, p).value, h + np.tanh(h) @ p.W_s.T + p.b_s, atol=1e-13)

    def test_permutation_equivariant(self, rng):
        p = random_params(rng)
        f = rng.normal(size=(9, 4))
        perm = rng.permutation(9)
        np.testing.assert_array_equal(fnn_forward(f[perm], p).value, fnn_forward(f, p).value[perm])


class TestPool:
    def test_single(self):
        np.testing.assert_array_equal(pool(np.array([[1.0, 5.0]])).value, [1.0, 5.0])

    def test_pair(self):
        np.testing.assert_array_equal(pool(np.array([[1.0, 0.0], [3.0, 2.0]])).value, [2.0, 1.0])

    def test_empty(self):
        with pytest.raises(DomainError):
            pool(np.zeros((0, 2)))

    def test_descriptor_is_mean_of_outputs(self, rng):
        p = random_params(rng)
        f = rng.normal(size=(11, 4))
        for fwd in (rnn_forward, fnn_forward):
            out = fwd(f, p).value
            np.testing.assert_allclose(pool(out).value, out.mean(axis=0), atol=1e-12)


class TestTruncated:
    def test_equals_others_without_recurrent_weight(self, rng):
        p = random_params(rng)
        p.W_s[:] = 0
        f = rng.normal(size=(5, 4))
        a = truncated_rnn_forward(f, p).value
        np.testing.assert_array_equal(a, fnn_forward(f, p).value)
        np.testing.assert_array_equal(a, rnn_forward(f, p).value)

    def test_scalar_two_steps(self):
        f = np.array([[1.0], [1.0]])
        out = truncated_rnn_forward(f, SCALAR).value[:, 0]
        np.testing.assert_array_equal(out, rnn_forward(f, SCALAR).value[:, 0])
        assert out[1] == pytest.approx(1.380797, abs=1e-6)

    @pytest.mark.parametrize("T", [1, 2, 3, 16, 64])
    def test_correction_identity(self, rng, T):
        for _ in range(5):
            p = random_params(rng)
            f = rng.normal(size=(T, 4))
            gap = pool(fnn_forward(f, p)).value - pool(truncated_rnn_forward(f, p)).value
            # independent oracle: numpy expression of the last-frame term
            oracle = p.W_s @ np.tanh(p.W_i @ f[-1] + p.b_i) / T
            np.testing.assert_allclose(gap, oracle, rtol=0, atol=1e-12)
            np.testing.assert_allclose(correction_term(f, p), oracle, rtol=0, atol=1e-15)


class TestTransplant:
    def test_identity_and_involution(self, rng):
        p = random_params(rng)
        q = transplant(p)
        assert q is not p and q.equals(p)
        assert transplant(q).equals(p)

    def test_agrees_when_no_recurrence(self, rng):
        p = random_params(rng)
        p.W_s[:] = 0
        f = rng.normal(size=(6, 4))
        np.testing.assert_array_equal(describe(f, transplant(p), "fnn"), describe(f, p, "rnn"))


class TestApproxError:
    def test_zero_without_recurrent_weight(self, rng):
        p = random_params(rng)
        p.W_s[:] = 0
        per_step, pooled = approx_error(rng.normal(size=(8, 4)), p)
        np.testing.assert_array_equal(per_step, np.zeros(8))
        assert pooled == 0.0

    def test_single_step_oracle(self, rng):
        p = random_params(rng)
        f = rng.normal(size=(1, 4))
        per_step, pooled = approx_error(f, p)
        oracle = np.linalg.norm(p.W_s @ (np.tanh(0.0) - np.tanh(p.W_i @ f[0] + p.b_i)))
        assert per_step[0] == pytest.approx(oracle, abs=1e-13)
        assert pooled == pytest.approx(oracle, abs=1e-13)

    def test_monotone_along_scaling_ray(self, rng):
        base = random_params(rng, d1=4, d2=3, ws_scale=0.5)
        f = rng.normal(size=(10, 4))
        errs = []
        for alpha in (1.0, 0.5, 0.25, 0.0):
            p = base.copy()
            p.W_s *= alpha
            errs.append(approx_error(f, p)[1])
        assert errs == sorted(errs, reverse=True)
        assert errs[-1] == 0.0 and errs[0] > 0


class TestPermutation:
    def test_fnn_pool_invariant(self):
        for seed in range(50):
            r = np.random.default_rng(seed)
            p = random_params(r)
            f = r.normal(size=(8, 4))
            perm = r.permutation(8)
            np.testing.assert_allclose(describe(f[perm], p, "fnn"), describe(f, p, "fnn"), rtol=0, atol=1e-12)

    def test_rnn_pool_order_sensitive(self):
        differ = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            p = random_params(r)
            f = r.normal(size=(8, 4))
            perm = r.permutation(8)
            while np.array_equal(perm, np.arange(8)):
                perm = r.permutation(8)
            differ += np.max(np.abs(describe(f[perm], p, "rnn") - describe(f, p, "rnn"))) > 1e-6
        assert differ >= 19


class TestGradients:
    @pytest.mark.parametrize("fwd", [rnn_forward, fnn_forward, truncated_rnn_forward])
    @pytest.mark.parametrize("seed", range(5))
    def test_all_blocks(self, fwd, seed):
        r = np.random.default_rng(seed)
        p = random_params(r)
        arrays = dict(p.arrays(), f=r.normal(size=(5, 4)))

        def loss(n):
            stage = StageNodes(n["W_i"], n["b_i"], n["W_s"], n["b_s"])
            return tc.total(tc.square(pool(fwd(n["f"], stage))))

        check_gradients(loss, arrays)

    def test_with_dropout_fixed_masks(self):
        r = np.random.default_rng(7)
        p = random_params(r)
        f = r.normal(size=(4, 4))

        def loss(n):
            drop = Dropout(0.3, RngStream(11), True)   # fresh stream: same masks every call
            stage = StageNodes(n["W_i"], n["b_i"], n["W_s"], n["b_s"])
            return tc.total(tc.square(pool(rnn_forward(f, stage, drop))))

        check_gradients(loss, p.arrays())


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        p = random_params(rng, d1=5, d2=3)
        path = tmp_path / "p.sqsp"
        p.save(path)
        assert SeqStageParams.load(path).equals(p)
        assert SeqStageParams.load(path).to_bytes() == path.read_bytes()

    def test_header_layout(self, rng):
        buf = random_params(rng, d1=5, d2=3).to_bytes()
        assert buf[:4] == b"SQSP"
        assert np.frombuffer(buf[4:16], "<u4").tolist() == [1, 5, 3]
        assert len(buf) == 16 + 8 * (15 + 3 + 9 + 3)

    def test_corrupt(self, rng):
        buf = random_params(rng).to_bytes()
        with pytest.raises(FormatError):
            SeqStageParams.from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            SeqStageParams.from_bytes(buf[:-1])
        with pytest.raises(FormatError):
            SeqStageParams.from_bytes(buf[:4] + (2).to_bytes(4, "little") + buf[8:])

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            SeqStageParams(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 3)), np.zeros(3))
