"""Binary and semantic segmentation metrics: IoU, cIoU, gIoU, mIoU."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CategoryCountMismatch, EmptyRecords, ShapeMismatch

METRICS_HEADER = ["run_id", "mode", "mask_variant", "seed", "split", "ciou", "giou", "miou",
                  "n_samples"]


@dataclass(frozen=True)
class IoURecord:
    intersection: int
    union: int
    iou: float


def binarize(logits, threshold: float = 0.0) -> np.ndarray:
    """1 where the logit is strictly above ``threshold``."""
    x = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    return (x > threshold).astype(np.uint8)


def iou(pred, gt) -> IoURecord:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    return IoURecord(inter, union, 1.0 if union == 0 else inter / union)


def aggregate(records: Sequence[IoURecord]) -> tuple[float, float]:
    """(cIoU, gIoU). Empty-vs-empty pairs count as IoU 1 and add nothing to cIoU."""
    if not records:
        raise EmptyRecords("no records to aggregate")
    total_i = sum(r.intersection for r in records if r.union > 0)
    total_u = sum(r.union for r in records if r.union > 0)
    ciou = total_i / total_u if total_u else 1.0
    giou = float(np.mean([r.iou for r in records]))
    return ciou, giou


def upsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour enlargement of a square mask to ``size x size``."""
    m = np.asarray(mask)
    k = size // m.shape[0]
    if k * m.shape[0] != size or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"cannot upsample {m.shape} to {size}x{size} by an integer factor")
    return np.repeat(np.repeat(m, k, axis=0), k, axis=1)


def downsample_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Area-average a square binary mask onto a ``side x side`` grid, then threshold at 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    k = m.shape[0] // side
    cov = m.reshape(side, k, side, k).mean(axis=(1, 3))
    return (cov >= 0.5).astype(np.uint8)


def cell_coverage(mask: np.ndarray, side: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    k = m.shape[0] // side
    return m.reshape(side, k, side, k).mean(axis=(1, 3))


def threshold_sweep(logits, thresholds: Iterable[float]) -> list[np.ndarray]:
    return [binarize(logits, t) for t in thresholds]


def miou(logit_maps: Sequence, gt_map: np.ndarray, n_categories: int | None = None) -> float:
    """Mean per-category IoU after a pixelwise argmax over one logit map per category.

    Categories absent from both prediction and ground truth are skipped.
    """
    maps = np.stack([np.asarray(getattr(m, "data", m), dtype=np.float64) for m in logit_maps])
    if n_categories is not None and maps.shape[0] != n_categories:
        raise CategoryCountMismatch(f"{maps.shape[0]} logit maps for {n_categories} categories")
    gt = np.asarray(gt_map)
    if maps.shape[1:] != gt.shape:
        raise ShapeMismatch(f"logit maps {maps.shape[1:]} vs ground truth {gt.shape}")
    if gt.size and (gt.min() < 0 or gt.max() >= maps.shape[0]):
        raise CategoryCountMismatch("ground-truth category outside the queried list")
    pred = maps.argmax(axis=0)
    scores = []
    for c in range(maps.shape[0]):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            scores.append(np.count_nonzero(p & g) / union)
    return float(np.mean(scores)) if scores else 1.0


def resolution_ceiling(gts: Sequence[np.ndarray], side: int) -> float:
    """Best gIoU any ``side x side`` mask can reach, by per-cell coverage thresholding.

    For each ground truth, every superlevel set of cell coverage is scored at
    full resolution and the best one is kept.
    """
    scores = []
    for gt in gts:
        g = np.asarray(gt).astype(bool)
        size = g.shape[0]
        cov = cell_coverage(g, side)
        best = 0.0 if g.any() else 1.0
        for t in np.unique(cov[cov > 0]):
            pred = upsample_mask((cov >= t).astype(np.uint8), size).astype(bool)
            best = max(best, iou(pred, g).iou)
        scores.append(best)
    return float(np.mean(scores))


def format_metrics_row(run_id: str, mode: str, mask_variant: str, seed: int, split: str,
                       ciou: float, giou: float, miou_value: float, n_samples: int) -> list[str]:
    def fmt(v):
        return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

    return [run_id, mode, mask_variant, str(seed), split, fmt(ciou), fmt(giou), fmt(miou_value),
            str(n_samples)]


def write_metrics_csv(path, rows: Sequence[Sequence[str]], append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists())
    with path.open("a" if not fresh else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(METRICS_HEADER)
        w.writerows(rows)


def metrics_csv_text(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    return buf.getvalue()
