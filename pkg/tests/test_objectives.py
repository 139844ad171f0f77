"""Tests for the contrastive losses and regularisers."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixsep import diffmath as dm
from mixsep import objectives as ob
from mixsep.diffmath import ShapeError, Tensor

from oracles import infonce_loops, pooled_loops, volume_loops

SHAPE_A = (2, 3, 2, 2, 3)  # B, C, K, F, T
SHAPE_V = (2, 3, 2, 2, 2)  # B, C, K, H, W


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def random_batch(rng, B=2):
    a = lambda: t64(rng.normal(size=(B,) + SHAPE_A[1:]), True)
    v = lambda: t64(rng.normal(size=(B,) + SHAPE_V[1:]), True)
    return ob.BatchFeatures(aA=a(), aP=a(), am=a(), vA=v(), vP=v())


def score_oracle(A, V, head):
    """Pooled score matrix built from per-pair loop volumes."""
    B = A.shape[0]
    M = np.zeros((B, B))
    for i in range(B):
        for j in range(B):
            S = volume_loops(A[i], V[j])
            agg = S.max(axis=0) if head == "max" else S[head]
            M[i, j] = pooled_loops(agg)
    return M


class TestInfoNCE:
    @given(st.floats(-5, 5), st.integers(2, 12), st.floats(0.05, 3))
    def test_constant_scores_give_log_b(self, c, B, tau):
        loss = ob.infonce_symmetric(t64(np.full((B, B), c)), tau).data.item()
        assert abs(loss - math.log(B)) <= 1e-6

    def test_identity_example(self):
        loss = ob.infonce_symmetric(t64(np.eye(2)), 1.0).data.item()
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert loss == pytest.approx(0.3133, abs=1e-4)

    def test_large_margin_limit(self):
        assert ob.infonce_symmetric(t64(40 * np.eye(4)), 1.0).data.item() < 1e-12

    @given(arrays(np.float64, st.tuples(st.integers(2, 5)).map(lambda t: (t[0], t[0])),
                  elements=st.floats(-3, 3, allow_nan=False)), st.floats(0.1, 2))
    def test_matches_loops(self, S, tau):
        got = ob.infonce_symmetric(t64(S), tau).data.item()
        assert got == pytest.approx(infonce_loops(S, tau), abs=1e-9)

    def test_tensor_temperature_gets_gradient(self, rng):
        tau = t64(0.7, True)
        ob.infonce_symmetric(t64(rng.normal(size=(3, 3))), tau).backward()
        assert tau.grad is not None and np.isfinite(tau.grad).all()

    @pytest.mark.parametrize("S", [np.zeros((2, 3)), np.zeros((1, 1))])
    def test_shape_rejected(self, S):
        with pytest.raises(ShapeError):
            ob.infonce_symmetric(t64(S), 1.0)

    def test_non_positive_temperature(self):
        with pytest.raises(ValueError):
            ob.infonce_symmetric(t64(np.eye(2)), 0.0)


class TestContrastiveLosses:
    def test_correspondence_compositional_oracle(self, rng):
        b = random_batch(rng)
        tau = 0.4
        expect = (infonce_loops(score_oracle(b.aA.data, b.vA.data, "max"), tau)
                  + infonce_loops(score_oracle(b.aP.data, b.vP.data, "max"), tau))
        assert ob.correspondence_loss(b, tau).data.item() == pytest.approx(expect, abs=1e-9)

    def test_disentanglement_compositional_oracle(self, rng):
        b = random_batch(rng)
        tau = 0.6
        expect = (infonce_loops(score_oracle(b.am.data, b.vA.data, 0), tau)
                  + infonce_loops(score_oracle(b.am.data, b.vP.data, 1), tau))
        assert ob.disentanglement_loss(b, tau).data.item() == pytest.approx(expect, abs=1e-9)

    def test_identical_mixtures_and_images_give_log_b(self, rng):
        b = random_batch(rng, B=3)
        same = lambda x: t64(np.broadcast_to(x.data[:1], x.shape).copy())
        b = ob.BatchFeatures(b.aA, b.aP, same(b.am), same(b.vA), same(b.vP))
        assert ob.disentanglement_loss(b, 0.5).data.item() == pytest.approx(2 * math.log(3), abs=1e-9)

    def test_identical_mixtures_make_image_side_uniform(self, rng):
        # columns of the score matrix are constant, so only the image->audio half is log B
        b = random_batch(rng, B=3)
        am = np.broadcast_to(b.am.data[:1], b.am.shape).copy()
        b = ob.BatchFeatures(b.aA, b.aP, t64(am), b.vA, b.vP)
        got = ob.disentanglement_loss(b, 0.5).data.item()
        expect = 0.0
        for V, head in ((b.vA.data, 0), (b.vP.data, 1)):
            M = score_oracle(am, V, head) / 0.5
            row_ce = np.mean([np.log(np.exp(M[i]).sum()) - M[i, i] for i in range(3)])
            expect += 0.5 * (row_ce + math.log(3))
        assert got == pytest.approx(expect, abs=1e-9)

    def test_duplicate_rows_stay_finite(self, rng):
        b = random_batch(rng)
        dup = np.repeat(b.aA.data[:1], 2, axis=0)
        b = ob.BatchFeatures(t64(dup, True), b.aP, b.am, b.vA, b.vP)
        loss = ob.correspondence_loss(b, 0.1)
        loss.backward()
        assert np.isfinite(loss.data) and np.isfinite(b.aA.grad).all()

    @pytest.mark.parametrize("fn", [ob.correspondence_loss, ob.disentanglement_loss])
    def test_gradient_check(self, rng, fn):
        b = random_batch(rng)

        def f(aA, aP, am, vA, vP, tau):
            return fn(ob.BatchFeatures(aA, aP, am, vA, vP), tau)

        leaves = [b.aA, b.aP, b.am, b.vA, b.vP, t64(0.8, True)]
        assert dm.finite_diff_check(f, leaves, eps=1e-6) < 1e-3

    def test_batch_size_mismatch(self, rng):
        b = random_batch(rng)
        with pytest.raises(ShapeError):
            ob.BatchFeatures(b.aA, b.aP, b.am, b.vA, t64(np.zeros((3,) + SHAPE_V[1:])))


class TestRegularisers:
    def test_disreg_examples(self):
        S = np.array([2.0, 3.0]).reshape(2, 1, 1, 1, 1)
        assert ob.disentanglement_regularizer(S).data.item() == pytest.approx(6.0)
        S0 = np.stack([np.zeros((1, 2, 2, 2)), np.ones((1, 2, 2, 2))])
        assert ob.disentanglement_regularizer(S0).data.item() == 0.0

    @given(arrays(np.float64, (2, 2, 3, 2, 2), elements=st.floats(-3, 3, allow_nan=False)))
    def test_disreg_sign_flip(self, S):
        flipped = S.copy()
        flipped[1] *= -1
        assert ob.disentanglement_regularizer(t64(S)).data.item() == pytest.approx(
            ob.disentanglement_regularizer(t64(flipped)).data.item(), abs=1e-12)

    def test_disreg_needs_two_heads(self):
        with pytest.raises(ShapeError):
            ob.disentanglement_regularizer(np.zeros((3, 1, 1, 1, 1)))

    def test_splice_examples(self, rng):
        S = rng.normal(size=(2, 4, 2, 2))
        assert ob.splice_regularizer(t64(S), np.zeros(4)).data.item() == 0.0
        assert ob.splice_regularizer(t64(np.full((1, 1, 1, 1), 2.0)), np.ones(1)).data.item() == pytest.approx(4.0)

    @given(arrays(np.float64, (2, 5, 2, 2), elements=st.floats(-3, 3, allow_nan=False)),
           arrays(np.float64, (5,), elements=st.floats(0, 1)))
    def test_splice_homogeneous(self, S, mask):
        one = ob.splice_regularizer(t64(S), mask).data.item()
        two = ob.splice_regularizer(t64(2 * S), mask).data.item()
        assert two == pytest.approx(4 * one, rel=1e-9, abs=1e-12)

    def test_splice_weighting(self):
        S = np.zeros((1, 3, 1, 1))
        S[0, :, 0, 0] = [1.0, 2.0, 3.0]
        mask = np.array([0.0, 0.5, 1.0])
        # (0.5 * 4 + 1 * 9) / 1.5
        assert ob.splice_regularizer(t64(S), mask).data.item() == pytest.approx(11 / 1.5)

    @pytest.mark.parametrize("tau,expect", [(1.0, 0.0), (0.5, 0.0), (2.0, math.log(2) ** 2)])
    def test_calibration(self, tau, expect):
        assert ob.calibration_regularizer(tau).data.item() == pytest.approx(expect, abs=1e-12)

    def test_calibration_value(self):
        assert ob.calibration_regularizer(2.0).data.item() == pytest.approx(0.4805, abs=1e-4)

    def test_calibration_rejects_non_positive(self):
        with pytest.raises(ValueError):
            ob.calibration_regularizer(0.0)

    def test_nonneg_examples(self):
        r = np.random.default_rng(0)
        assert ob.nonneg_regularizer([np.abs(r.normal(size=(2, 3, 2, 2)))], 16, r).data.item() == 0.0
        assert ob.nonneg_regularizer([np.full((1,), -2.0)], 1, r).data.item() == pytest.approx(4.0)
        assert ob.nonneg_regularizer([np.zeros(4)], 3, r).data.item() == 0.0

    def test_nonneg_matches_sampled_oracle(self, rng):
        vols = [rng.normal(size=(3, 2)), rng.normal(size=(5,))]
        flat = np.concatenate([v.ravel() for v in vols])
        picks = np.random.default_rng(7).integers(0, flat.size, size=10)
        expect = np.mean(np.minimum(flat[picks], 0) ** 2)
        got = ob.nonneg_regularizer([t64(v) for v in vols], 10, np.random.default_rng(7)).data.item()
        assert got == pytest.approx(expect, abs=1e-12)

    def test_nonneg_rejects_empty_sample(self):
        with pytest.raises(ValueError):
            ob.nonneg_regularizer([np.zeros(2)], 0, np.random.default_rng(0))

    def test_tv_examples(self):
        assert ob.tv_regularizer(np.ones((2, 5, 2, 2))).data.item() == 0.0
        assert ob.tv_regularizer(np.array([0.0, 1.0]).reshape(1, 2, 1, 1)).data.item() == pytest.approx(1.0)

    @given(arrays(np.float64, (2, 4, 2, 2), elements=st.floats(-3, 3, allow_nan=False)))
    def test_tv_time_reversal(self, S):
        assert ob.tv_regularizer(t64(S)).data.item() == pytest.approx(
            ob.tv_regularizer(t64(S[:, ::-1].copy())).data.item(), abs=1e-12)

    def test_tv_needs_two_frames(self):
        with pytest.raises(ShapeError):
            ob.tv_regularizer(np.zeros((2, 1, 2, 2)))


class TestTotalLoss:
    def reg_inputs(self, rng, B=2, T=3):
        return ob.RegInputs(splice_sound=rng.uniform(size=(B, T)), splice_speech=rng.uniform(size=(B, T)),
                            nonneg_seed=3, omega=8)

    def test_zero_lambdas_bitwise(self, rng):
        b = random_batch(rng)
        out = ob.total_loss(b, 0.5, ob.LossWeights.zero_regularizers(), self.reg_inputs(rng))
        ref = ob.correspondence_loss(b, 0.5) + ob.disentanglement_loss(b, 0.5)
        assert out.total.data.tobytes() == ref.data.tobytes()
        assert set(out.terms) == {"L_cor", "L_dis", "total"}

    def test_weighted_sum_oracle(self, rng):
        b = random_batch(rng)
        reg = self.reg_inputs(rng)
        w = ob.LossWeights()
        out = ob.total_loss(b, 1.7, w, reg)
        t = out.terms
        expect = (w.cor * t["L_cor"] + w.dis * t["L_dis"] + w.disreg * t["L_DisReg"] + w.splice * t["L_Splice"]
                  + w.cal * t["L_Cal"] + w.nonneg * t["L_NonNeg"] + w.tv * t["L_TV"])
        assert t["total"] == pytest.approx(expect, rel=1e-12)
        assert t["L_Cal"] == pytest.approx(math.log(1.7) ** 2)

    def test_term_values_from_parts(self, rng):
        b = random_batch(rng)
        out = ob.total_loss(b, 0.5, ob.LossWeights(), self.reg_inputs(rng))
        pos = [ob.pairwise_volumes(a, v).data[[0, 1], [0, 1]]
               for a, v in ((b.aA, b.vA), (b.aP, b.vP), (b.am, b.vA), (b.am, b.vP))]
        disreg = np.mean([np.abs(p[:, 0] * p[:, 1]).mean() for p in pos])
        tv = np.mean([np.mean((p[..., 1:, :, :] - p[..., :-1, :, :]) ** 2) for p in pos])
        assert out.terms["L_DisReg"] == pytest.approx(disreg, rel=1e-12)
        assert out.terms["L_TV"] == pytest.approx(tv, rel=1e-12)

    def test_default_weights(self):
        w = ob.LossWeights()
        assert (w.cor, w.dis, w.disreg, w.splice, w.cal, w.nonneg, w.tv) == (1, 1, 0.05, 0.01, 0.1, 0.01, 0.01)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            ob.LossWeights(tv=-0.1)

    def test_all_zero_rejected(self, rng):
        with pytest.raises(ValueError):
            ob.total_loss(random_batch(rng), 1.0, ob.LossWeights.zero_regularizers(cor=0.0, dis=0.0))

    def test_gradient_check(self, rng):
        b = random_batch(rng)
        reg = self.reg_inputs(rng)

        def f(aA, aP, am, vA, vP, tau):
            return ob.total_loss(ob.BatchFeatures(aA, aP, am, vA, vP), tau, ob.LossWeights(), reg).total

        leaves = [b.aA, b.aP, b.am, b.vA, b.vP, t64(1.3, True)]
        assert dm.finite_diff_check(f, leaves, eps=1e-6) < 1e-3
