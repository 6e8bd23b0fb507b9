import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokseg.autograd import Tensor
from tokseg.errors import CategoryCountMismatch, EmptyRecords, ShapeMismatch
from tokseg.metrics import (METRICS_HEADER, IoURecord, aggregate, binarize, cell_coverage,
                            downsample_mask, format_metrics_row, iou, metrics_csv_text, miou,
                            resolution_ceiling, threshold_sweep, upsample_mask,
                            write_metrics_csv)


def test_binarize_strict_tie():
    assert binarize(np.array([-1.0, 0.0, 1.0])).tolist() == [0, 0, 1]
    assert binarize(Tensor([-1.0, 0.0, 1.0])).tolist() == [0, 0, 1]
    assert binarize(np.full(5, -20.0)).sum() == 0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_sweep_monotone(xs):
    lo, mid, hi = threshold_sweep(np.array(xs), [-1.0, 0.0, 1.0])
    assert (mid <= lo).all() and (hi <= mid).all()


def test_iou_hand_counts():
    gt = np.array([[1, 1, 0], [1, 0, 0]])
    pred = np.array([[1, 1, 0], [0, 0, 1]])
    r = iou(pred, gt)
    assert (r.intersection, r.union, r.iou) == (2, 4, 0.5)
    assert iou(gt, gt).iou == 1.0
    assert iou(gt, 1 - gt).iou == 0.0


def test_iou_empty_pair():
    z = np.zeros((3, 3))
    assert iou(z, z) == IoURecord(0, 0, 1.0)


def test_iou_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_aggregate_hand_grid():
    # explicit 1x5 grids giving (I=2, U=4) and (I=3, U=5)
    a = iou(np.array([1, 1, 1, 0, 0]), np.array([0, 1, 1, 1, 0]))
    b = iou(np.array([1, 1, 1, 1, 0]), np.array([0, 1, 1, 1, 1]))
    assert (a.intersection, a.union, b.intersection, b.union) == (2, 4, 3, 5)
    ciou, giou = aggregate([a, b])
    assert ciou == pytest.approx(5 / 9, abs=1e-15)
    assert giou == pytest.approx(0.55, abs=1e-15)


def test_aggregate_single_and_perfect():
    r = IoURecord(3, 4, 0.75)
    assert aggregate([r]) == (0.75, 0.75)
    assert aggregate([IoURecord(5, 5, 1.0), IoURecord(0, 0, 1.0)]) == (1.0, 1.0)
    with pytest.raises(EmptyRecords):
        aggregate([])


def test_aggregate_skips_empty_union_in_ciou():
    ciou, giou = aggregate([IoURecord(1, 4, 0.25), IoURecord(0, 0, 1.0)])
    assert ciou == 0.25 and giou == 0.625


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_aggregate_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    recs = [iou(rng.random((4, 4)) > 0.5, rng.random((4, 4)) > 0.5) for _ in range(6)]
    a = aggregate(recs)
    b = aggregate([recs[i] for i in rng.permutation(6)])
    assert a[0] == pytest.approx(b[0], abs=1e-15) and a[1] == pytest.approx(b[1], abs=1e-15)


@pytest.mark.parametrize("k", [2, 4])
def test_iou_invariant_to_nearest_upscaling(k, rng):
    p, g = rng.random((6, 6)) > 0.4, rng.random((6, 6)) > 0.6
    assert iou(upsample_mask(p, 6 * k), upsample_mask(g, 6 * k)).iou == pytest.approx(iou(p, g).iou)


def loop_miou(pred, gt, n):
    scores = []
    for c in range(n):
        inter = union = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                a, b = pred[i, j] == c, gt[i, j] == c
                inter += a and b
                union += a or b
        if union:
            scores.append(inter / union)
    return sum(scores) / len(scores)


def test_miou_perfect_and_swapped():
    gt = np.array([[0, 0], [1, 1]])
    perfect = [(gt == 0).astype(float), (gt == 1).astype(float)]
    assert miou(perfect, gt) == 1.0
    assert miou(perfect[::-1], gt) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_miou_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    maps = [rng.normal(size=(5, 4)) for _ in range(3)]
    gt = rng.integers(0, 3, size=(5, 4))
    pred = np.argmax(np.stack(maps), axis=0)
    assert miou(maps, gt, 3) == pytest.approx(loop_miou(pred, gt, 3), abs=1e-15)


def test_miou_errors():
    with pytest.raises(CategoryCountMismatch):
        miou([np.zeros((2, 2))] * 2, np.zeros((2, 2), dtype=int), n_categories=3)
    with pytest.raises(CategoryCountMismatch):
        miou([np.zeros((2, 2))] * 2, np.full((2, 2), 2))


def test_resample_helpers():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[:4, :3] = 1
    assert cell_coverage(m, 2).tolist() == [[0.75, 0.0], [0.0, 0.0]]
    assert downsample_mask(m, 2).tolist() == [[1, 0], [0, 0]]
    assert downsample_mask(m, 4)[0].tolist() == [1, 1, 0, 0]
    assert upsample_mask(np.eye(2), 4).sum() == 8
    with pytest.raises(ShapeMismatch):
        upsample_mask(np.eye(3), 8)


def brute_ceiling(gt, side):
    # exhaustive over every subset of cells for tiny grids
    size = gt.shape[0]
    best = 0.0
    for bits in range(1 << (side * side)):
        cells = np.array([(bits >> i) & 1 for i in range(side * side)]).reshape(side, side)
        best = max(best, iou(upsample_mask(cells, size), gt).iou)
    return best


@pytest.mark.parametrize("seed", range(6))
def test_ceiling_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.random((8, 8)) > 0.6).astype(np.uint8)
    gt[0, 0] = 1
    assert resolution_ceiling([gt], 2) == pytest.approx(brute_ceiling(gt, 2), abs=1e-15)
    assert resolution_ceiling([gt], 1) == pytest.approx(brute_ceiling(gt, 1), abs=1e-15)


def test_ceiling_full_resolution_is_perfect(rng):
    gts = [(rng.random((16, 16)) > 0.5).astype(np.uint8) for _ in range(3)]
    assert resolution_ceiling(gts, 16) == 1.0


def test_metrics_csv(tmp_path):
    row = format_metrics_row("r1", "Full_RFA", "ImgBidirSeg", 0, "test", 0.5, 0.25, math.nan, 200)
    assert row == ["r1", "Full_RFA", "ImgBidirSeg", "0", "test", "0.500000", "0.250000", "nan", "200"]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [row])
    write_metrics_csv(path, [row], append=True)
    text = path.read_text()
    assert text == metrics_csv_text([row, row])
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == METRICS_HEADER and len(parsed) == 3
    write_metrics_csv(path, [row])
    assert len(path.read_text().splitlines()) == 2
