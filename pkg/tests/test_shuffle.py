import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokseg import autograd as ag
from tokseg.autograd import Tensor
from tokseg.errors import DimMismatch, Indivisible
from tokseg.layers import Mlp, concat_identity, copy_to_chunks
from tokseg.shuffle import (GridFeatures, ShuffleSpec, inverse_table, pixel_shuffle_compress,
                            pixel_unshuffle_expand, scanning_compress, self_replicate_compress,
                            shuffle_table, upsample, upsample_bilinear, upsample_nearest)


def grid(x, h, w):
    return GridFeatures(h, w, Tensor(np.asarray(x, dtype=float).reshape(h * w, -1)))


def loop_shuffle(x, h, w, s):
    """Nested-loop reference: concat each s x s block in row-major order."""
    d0 = x.shape[1]
    out = np.zeros(((h // s) * (w // s), s * s * d0))
    for R in range(h // s):
        for C in range(w // s):
            parts = []
            for i in range(s):
                for j in range(s):
                    parts.append(x[(R * s + i) * w + C * s + j])
            out[R * (w // s) + C] = np.concatenate(parts)
    return out


def loop_scan(x, h, w, s):
    d0 = x.shape[1]
    out = np.zeros((h * w, s * s * d0))
    for r in range(h):
        for c in range(w):
            parts = [x[min(r + i, h - 1) * w + min(c + j, w - 1)] for i in range(s) for j in range(s)]
            out[r * w + c] = np.concatenate(parts)
    return out


def test_shuffle_single_block_identity():
    F = grid([[1], [2], [3], [4]], 2, 2)
    out = pixel_shuffle_compress(F, ShuffleSpec(2, 1, 4), Mlp.affine(np.eye(4)))
    assert out.data.data.tolist() == [[1.0, 2.0, 3.0, 4.0]]


def test_shuffle_all_ones_sum():
    F = grid([[1], [2], [3], [4]], 2, 2)
    out = pixel_shuffle_compress(F, ShuffleSpec(2, 1, 1), Mlp.affine(np.ones((4, 1))))
    assert out.data.data.tolist() == [[10.0]]


@pytest.mark.parametrize("seed", range(3))
def test_shuffle_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(16, 3))
    mlp = Mlp(12, 5, rng)
    got = pixel_shuffle_compress(grid(x, 4, 4), ShuffleSpec(2, 3, 5), mlp).data.data
    want = mlp(Tensor(loop_shuffle(x, 4, 4, 2))).data
    assert np.array_equal(got, want)


def test_shuffle_rejects_odd_grid():
    with pytest.raises(Indivisible):
        pixel_shuffle_compress(grid(np.zeros((6, 1)), 3, 2), ShuffleSpec(2, 1, 4), Mlp.affine(np.eye(4)))


def test_shuffle_rejects_wrong_mlp():
    with pytest.raises(DimMismatch):
        pixel_shuffle_compress(grid(np.zeros((4, 2)), 2, 2), ShuffleSpec(2, 2, 4), Mlp.affine(np.eye(4)))


def test_self_replicate_hand_values():
    F = grid([[3.0]], 1, 1)
    assert self_replicate_compress(F, ShuffleSpec(2, 1, 1), Mlp.affine(np.ones((4, 1)))).data.data.tolist() == [[12.0]]
    assert self_replicate_compress(F, ShuffleSpec(2, 1, 4), Mlp.affine(np.eye(4))).data.data.tolist() == [[3.0] * 4]


def test_self_replicate_constant_image_oracle(rng):
    mlp = Mlp(8, 6, rng)
    spec = ShuffleSpec(2, 2, 6)
    F = grid(np.tile(rng.normal(size=2), (64, 1)), 8, 8)
    a = upsample_nearest(pixel_shuffle_compress(F, spec, mlp), 2).data.data
    b = self_replicate_compress(F, spec, mlp).data.data
    assert np.array_equal(a, b)


def test_scanning_full_and_clamped_windows():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = scanning_compress(grid([[a], [b], [c], [d]], 2, 2), ShuffleSpec(2, 1, 4), Mlp.affine(np.eye(4)))
    assert out.data.data[0].tolist() == [a, b, c, d]
    assert out.data.data[3].tolist() == [d, d, d, d]


def test_scanning_matches_loop_oracle(rng):
    x = rng.normal(size=(16, 2))
    mlp = Mlp(8, 3, rng)
    got = scanning_compress(grid(x, 4, 4), ShuffleSpec(2, 2, 3), mlp).data.data
    assert np.array_equal(got, mlp(Tensor(loop_scan(x, 4, 4, 2))).data)


def test_scanning_corners_reproduce_shuffle(rng):
    x = rng.normal(size=(64, 2))
    mlp = Mlp(8, 3, rng)
    spec = ShuffleSpec(2, 2, 3)
    scan = scanning_compress(grid(x, 8, 8), spec, mlp).data.data.reshape(8, 8, 3)
    shuf = pixel_shuffle_compress(grid(x, 8, 8), spec, mlp).data.data.reshape(4, 4, 3)
    assert np.array_equal(scan[::2, ::2], shuf)


def test_unshuffle_chunk_placement():
    out = pixel_unshuffle_expand(grid([[5.0]], 1, 1), ShuffleSpec(2, 1, 1),
                                 Mlp.affine(np.array([[1.0, 2.0, 3.0, 4.0]])))
    assert out.data.data.reshape(2, 2).tolist() == [[5.0, 10.0], [15.0, 20.0]]


def test_unshuffle_copy_equals_nearest(rng):
    F = grid(rng.normal(size=(6, 3)), 2, 3)
    a = pixel_unshuffle_expand(F, ShuffleSpec(2, 3, 3), Mlp.affine(copy_to_chunks(3, 4))).data.data
    assert np.array_equal(a, upsample_nearest(F, 2).data.data)


@pytest.mark.parametrize("hw", [2, 4, 8])
@pytest.mark.parametrize("seed", range(10))
def test_roundtrip_bit_exact(hw, seed):
    x = np.random.default_rng(seed).normal(size=(hw * hw, 2))
    spec = ShuffleSpec(2, 2, 8)
    y = pixel_shuffle_compress(grid(x, hw, hw), spec, Mlp.affine(concat_identity(2, 4)))
    back = pixel_unshuffle_expand(y, spec, Mlp.affine(np.eye(8)))
    assert np.array_equal(back.data.data, x)


@pytest.mark.parametrize("hw", [2, 4, 8])
def test_table_is_permutation(hw):
    t = shuffle_table(hw, hw, 2)
    inv = inverse_table(t)
    assert sorted(t.tolist()) == list(range(hw * hw))
    assert np.array_equal(t[inv], np.arange(hw * hw))
    assert np.array_equal(inv[t], np.arange(hw * hw))


def test_upsample_hand_values(rng):
    F = grid(rng.normal(size=(4, 2)), 2, 2)
    assert upsample_nearest(F, 1) is F
    seven = upsample_nearest(grid([[7.0]], 1, 1), 2)
    assert seven.data.data.ravel().tolist() == [7.0] * 4


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2 ** 31))
@settings(max_examples=40, deadline=None)
def test_upsample_conserves_mass(h, w, s, seed):
    x = np.random.default_rng(seed).normal(size=(h * w, 2))
    out = upsample_nearest(grid(x, h, w), s).data.data
    assert out.sum() == pytest.approx(s * s * x.sum(), rel=1e-12, abs=1e-12)


def test_bilinear_preserves_constants():
    F = grid(np.full((9, 2), 4.0), 3, 3)
    assert np.allclose(upsample_bilinear(F, 2).data.data, 4.0)
    assert upsample(F, 2, "bilinear").h == 6
    with pytest.raises(ValueError):
        upsample(F, 2, "cubic")


@pytest.mark.parametrize("op", ["compress", "replicate", "scan", "expand", "upsample"])
def test_operators_differentiable(op, rng):
    spec = ShuffleSpec(2, 2, 3)
    comp = Mlp(8, 3, rng)
    expand = Mlp(3, 12, rng)
    w = Tensor(rng.normal(size=(16, 3)))

    def fn(x):
        F = GridFeatures(4, 4, x) if op != "expand" and op != "upsample" else GridFeatures(2, 2, x)
        if op == "compress":
            y = pixel_shuffle_compress(F, spec, comp).data
            return ag.sum_axis(ag.mul(y, Tensor(w.data[:4])))
        if op == "replicate":
            y = self_replicate_compress(F, spec, comp).data
        elif op == "scan":
            y = scanning_compress(F, spec, comp).data
        elif op == "expand":
            y = pixel_unshuffle_expand(F, spec, expand).data
        else:
            y = upsample_nearest(F, 2).data
        return ag.sum_axis(ag.mul(y, w))

    shape = (16, 2) if op in ("compress", "replicate", "scan") else (4, 3)
    assert ag.grad_check(fn, [Tensor(rng.normal(size=shape))]) <= 1e-5
