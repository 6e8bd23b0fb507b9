import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokseg import autograd as ag
from tokseg.autograd import Tensor
from tokseg.checks import collapse_bundle, naive_mask, pipeline_grad_error, tiny_config, tiny_inputs
from tokseg.errors import DimMismatch, NonBinaryGT, NonFinite, ShapeMismatch, SharingViolation
from tokseg.head import (FeatureBundle, MlpSharing, PipelineMode, PusMlps, bce_loss, dice_loss,
                         fuse, mask_side, predict_mask, residual_amplify, residual_refill,
                         seg_embed_post, text_ce_loss, total_loss)
from tokseg.layers import Mlp, copy_to_chunks
from tokseg.masks import TokenLayout
from tokseg.model import SegModel
from tokseg.shuffle import GridFeatures, ShuffleSpec, pixel_unshuffle_expand


def G(x, h, w):
    return GridFeatures(h, w, Tensor(np.asarray(x, dtype=float).reshape(h * w, -1)))


def random_bundle(rng, g1=2, d=3):
    g0 = 2 * g1
    return FeatureBundle(F_V0=G(rng.normal(size=(g0 * g0, d)), g0, g0),
                         F_V1=G(rng.normal(size=(g1 * g1, d)), g1, g1),
                         F_V1HQ=G(rng.normal(size=(g0 * g0, d)), g0, g0),
                         F_IMG=G(rng.normal(size=(g1 * g1, d)), g1, g1),
                         F_SEG=Tensor(rng.normal(size=d)))


def loop_expand(x, h, w, s, mlp):
    """Index-by-index unshuffle: chunk k of token (R, C) goes to pixel (R*s + k//s, C*s + k%s)."""
    y = mlp(Tensor(x)).data
    d = y.shape[1] // (s * s)
    out = np.zeros((h * s * w * s, d))
    for R in range(h):
        for C in range(w):
            for k in range(s * s):
                r, c = R * s + k // s, C * s + k % s
                out[r * w * s + c] = y[R * w + C, k * d:(k + 1) * d]
    return out


def loop_up(x, h, w, s):
    out = np.zeros((h * s * w * s, x.shape[1]))
    for r in range(h * s):
        for c in range(w * s):
            out[r * w * s + c] = x[(r // s) * w + c // s]
    return out


# ---------------------------------------------------------------------------
# fusion

def test_refill_zero_residual(rng):
    b = random_bundle(rng)
    b.F_IMG = GridFeatures(2, 2, Tensor(b.F_V1.data.data.copy()))
    assert np.array_equal(residual_refill(b, ShuffleSpec(2, 3, 3)).data.data, b.F_V1HQ.data.data)


def test_refill_single_token():
    b = FeatureBundle(F_V0=G(np.zeros((4, 1)), 2, 2), F_V1=G([[0.0]], 1, 1),
                      F_V1HQ=G(np.zeros((4, 1)), 2, 2), F_IMG=G([[2.0]], 1, 1), F_SEG=Tensor([0.0]))
    assert residual_refill(b, ShuffleSpec(2, 1, 1)).data.data.ravel().tolist() == [2.0] * 4


def test_refill_loop_oracle(rng):
    b = random_bundle(rng)
    got = residual_refill(b, ShuffleSpec(2, 3, 3)).data.data
    res = b.F_IMG.data.data - b.F_V1.data.data
    want = np.zeros_like(got)
    for p in range(16):
        r, c = divmod(p, 4)
        want[p] = b.F_V1HQ.data.data[p] + res[(r // 2) * 2 + c // 2]
    assert np.array_equal(got, want)


def test_refill_shape_mismatch(rng):
    b = random_bundle(rng)
    b.F_V1HQ = G(np.zeros((4, 3)), 2, 2)
    with pytest.raises(ShapeMismatch):
        residual_refill(b, ShuffleSpec(2, 3, 3))


def test_amplify_copy_mlps_hand_case():
    copy = Mlp.affine(copy_to_chunks(1, 4))
    b = FeatureBundle(F_V0=G(np.zeros((4, 1)), 2, 2), F_V1=G([[0.0]], 1, 1),
                      F_V1HQ=G(np.zeros((4, 1)), 2, 2), F_IMG=G([[1.0]], 1, 1), F_SEG=Tensor([0.0]))
    out = residual_amplify(b, ShuffleSpec(2, 1, 1), MlpSharing.Shared2, copy, copy)
    assert (out.h, out.w) == (4, 4)
    assert out.data.data.ravel().tolist() == [1.0] * 16


def test_amplify_zero_residual(rng):
    b, spec, rng = collapse_bundle(seed=1)
    f = Mlp(spec.d, 4 * spec.d, rng)
    out = residual_amplify(b, spec, MlpSharing.Shared2, f, f)
    assert np.array_equal(out.data.data, pixel_unshuffle_expand(b.F_V1HQ, spec, f).data.data)


def test_amplify_loop_oracle_shared2(rng):
    b = random_bundle(rng)
    spec = ShuffleSpec(2, 3, 3)
    f, fp = Mlp(3, 12, rng), Mlp(3, 12, rng)
    got = residual_amplify(b, spec, MlpSharing.Shared2, f, fp).data.data
    rfa = loop_expand(b.F_IMG.data.data, 2, 2, 2, fp) - loop_expand(b.F_V1.data.data, 2, 2, 2, f)
    want = loop_expand(b.F_V1HQ.data.data, 4, 4, 2, f) + loop_up(rfa, 4, 4, 2)
    assert np.allclose(got, want, rtol=0, atol=1e-13)


def test_sharing_rules(rng):
    f, g, h = Mlp(3, 12, rng), Mlp(3, 12, rng), Mlp(3, 12, rng)
    assert PusMlps.wire("Shared1", f, f).img is f
    with pytest.raises(SharingViolation):
        PusMlps.wire("Shared1", f, g)
    w = PusMlps.wire("Shared2", f, g)
    assert w.v1 is w.hq is f and w.img is g
    with pytest.raises(SharingViolation):
        PusMlps.wire("Shared2", f, g, h)
    w3 = PusMlps.wire("Independent3", f, g, h)
    assert len({id(w3.v1), id(w3.img), id(w3.hq)}) == 3
    with pytest.raises(SharingViolation):
        PusMlps.wire("Independent3", f, g)


def test_seg_embed_post_values():
    copy = Mlp.affine(copy_to_chunks(2, 4))
    assert seg_embed_post(Tensor([1.5, -2.0]), copy, 4).data.tolist() == [1.5, -2.0]
    chunks = Mlp.affine(np.array([[1.0, 2.0, 3.0, 4.0]]))
    assert seg_embed_post(Tensor([1.0]), chunks, 4).data.tolist() == [2.5]
    with pytest.raises(DimMismatch):
        seg_embed_post(Tensor([1.0]), Mlp.affine(np.ones((1, 3))), 4)


def test_seg_embed_post_zero(rng):
    f = Mlp.affine(rng.normal(size=(3, 12)))
    assert np.array_equal(seg_embed_post(Tensor(np.zeros(3)), f, 4).data, np.zeros(3))


@pytest.mark.parametrize("mode,side", [("CompressedBaseline", 2), ("HROnly", 4), ("HR_RFR", 4),
                                       ("PUSOnly", 4), ("Full_RFA", 8)])
def test_resolution_contract(mode, side, rng):
    b = random_bundle(rng)
    f = Mlp(3, 12, rng)
    img, seg = fuse(b, mode, ShuffleSpec(2, 3, 3), "Shared2", f, Mlp(3, 12, rng))
    assert (img.h, img.w) == (side, side)
    assert seg.shape == (3,)
    assert mask_side(mode, 2, 2) == side


@pytest.mark.parametrize("mode,side", [("CompressedBaseline", 4), ("HROnly", 8), ("HR_RFR", 8),
                                       ("PUSOnly", 8), ("Full_RFA", 16)])
def test_model_mask_lengths(mode, side, rng):
    from tokseg.model import ModelConfig, make_batch
    from tokseg.vocab import encode
    m = SegModel(ModelConfig(), seed=0)
    batch = make_batch(encode(["[BOS]", "<image>", ":"]), [encode(["please", "segment", "the", "red", "circle"])],
                       [True], [encode(["it", "is", "."])], 16)
    with ag.no_grad():
        out = m.forward(rng.random((1, 64, 64, 3)), batch, mode, "ImgBidirSeg")
    assert out["mask_logits"].shape == (1, side * side)


# ---------------------------------------------------------------------------
# mask head

def test_predict_mask_hand():
    F = Tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [1.0, 1.0, 0, 0]])
    assert predict_mask(F, Tensor([1.0, 1.0, 0, 0])).data.tolist() == [0.5, 0.5, 1.0]
    assert predict_mask(F, Tensor(np.zeros(4))).data.tolist() == [0.0] * 3


@pytest.mark.parametrize("seed", range(5))
def test_predict_mask_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    F, g = rng.normal(size=(256, 64)), rng.normal(size=64)
    assert np.abs(predict_mask(Tensor(F), Tensor(g)).data - naive_mask(F, g)).max() <= 1e-12


def test_predict_mask_dim_mismatch():
    with pytest.raises(DimMismatch):
        predict_mask(Tensor(np.ones((3, 4))), Tensor(np.ones(5)))


@given(st.floats(0.01, 100), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_mask_linearity_and_sign_invariance(c, seed):
    rng = np.random.default_rng(seed)
    F, g = rng.normal(size=(8, 4)), rng.normal(size=4)
    base = predict_mask(Tensor(F), Tensor(g)).data
    assert np.allclose(predict_mask(Tensor(c * F), Tensor(g)).data, c * base, rtol=1e-12, atol=1e-12)
    assert np.array_equal(np.sign(predict_mask(Tensor(F), Tensor(c * g)).data), np.sign(base))


# ---------------------------------------------------------------------------
# losses

def test_bce_values():
    assert abs(bce_loss(Tensor(np.zeros(6)), np.array([1, 0, 1, 1, 0, 0])).item() - math.log(2)) <= 1e-9
    assert bce_loss(Tensor([20.0]), np.array([1])).item() < 1e-8
    assert bce_loss(Tensor([0.0, 0.0]), np.array([1, 0])).item() == pytest.approx(0.693147, abs=1e-6)


def test_dice_values():
    big = Tensor(np.full(4, 60.0))
    assert abs(dice_loss(big, np.ones(4)).item()) <= 1e-12
    assert abs(dice_loss(big, np.zeros(4)).item() - 0.8) <= 1e-12
    assert abs(dice_loss(Tensor(np.full(4, -60.0)), np.zeros(4)).item()) <= 1e-12


def test_non_binary_gt():
    with pytest.raises(NonBinaryGT):
        bce_loss(Tensor(np.zeros(2)), np.array([0.5, 1.0]))
    with pytest.raises(NonBinaryGT):
        dice_loss(Tensor(np.zeros(2)), np.array([2, 0]))


@given(st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_loss_ranges(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=10) * 5)
    gt = (rng.random(10) < 0.5).astype(float)
    assert bce_loss(logits, gt).item() >= 0
    assert 0 <= dice_loss(logits, gt).item() < 1
    perfect = Tensor(np.where(gt > 0, 20.0, -20.0))
    assert bce_loss(perfect, gt).item() < 0.01 and dice_loss(perfect, gt).item() < 0.01


def test_text_ce_values():
    lay = TokenLayout.from_string("TTTAA")
    assert abs(text_ce_loss(Tensor(np.zeros((5, 64))), [3, 4], lay).item() - math.log(64)) <= 1e-9
    logits = np.zeros((5, 64))
    logits[2, 3] = logits[3, 4] = 20.0
    assert text_ce_loss(Tensor(logits), [3, 4], lay).item() < 1e-6
    assert text_ce_loss(Tensor(logits), [], TokenLayout.from_string("TTTTT")).item() == 0.0


def test_text_ce_ignores_other_positions(rng):
    lay = TokenLayout.from_string("TTTAA")
    a = rng.normal(size=(5, 64))
    b = a.copy()
    b[0] += rng.normal(size=64)
    b[4] += rng.normal(size=64)  # last position predicts nothing
    assert text_ce_loss(Tensor(a), [3, 4], lay).item() == text_ce_loss(Tensor(b), [3, 4], lay).item()


def test_total_loss():
    assert total_loss(Tensor(0.1), Tensor(0.2), Tensor(0.3)).item() == pytest.approx(0.6, abs=1e-15)
    assert total_loss(Tensor(1.25), Tensor(0.0), Tensor(0.0)).item() == 1.25
    bad = Tensor(0.0)
    bad.data = np.array(np.inf)
    with pytest.raises(NonFinite):
        total_loss(Tensor(0.0), bad, Tensor(0.0))


def test_total_grad_is_sum_of_parts(rng):
    data = rng.normal(size=6)
    gt = np.array([1, 0, 1, 0, 0, 1])
    lay = TokenLayout.from_string("TA")

    def text(x):
        return text_ce_loss(ag.reshape(ag.concat_lastdim([x, x]), (2, 6)), [1], lay)

    def grad(fn):
        x = Tensor(data, requires_grad=True)
        return ag.backward(fn(x))[x]

    g_total = grad(lambda x: total_loss(text(x), bce_loss(x, gt), dice_loss(x, gt)))
    g_sum = grad(text) + grad(lambda x: bce_loss(x, gt)) + grad(lambda x: dice_loss(x, gt))
    assert np.allclose(g_total, g_sum, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("mode", ["CompressedBaseline", "HROnly", "HR_RFR", "PUSOnly", "Full_RFA"])
def test_every_mode_differentiable(mode):
    assert pipeline_grad_error(mode, seed=1, max_coords=3) <= 1e-5


def test_shared2_tied_after_training(tiny_cfg):
    m = SegModel(tiny_cfg, seed=0, sharing="Shared2")
    opt = ag.AdamW(m.parameters())
    images, batch, rng = tiny_inputs(tiny_cfg)
    gt = (rng.random((1, 64)) < 0.5).astype(float)
    for _ in range(3):
        out = m.forward(images, batch, "Full_RFA", "ImgBidirSeg")
        loss = ag.add(bce_loss(out["mask_logits"], gt), dice_loss(out["mask_logits"], gt))
        grads = ag.backward(loss)
        opt.step(grads, 1e-2)
    wired = PusMlps.wire(m.sharing, m.f_pus, m.pus_prime, m.pus_hq)
    assert wired.v1 is wired.hq
    for (n1, p1), (n2, p2) in zip(wired.v1.named_parameters(), wired.hq.named_parameters()):
        assert np.array_equal(p1.data, p2.data)
