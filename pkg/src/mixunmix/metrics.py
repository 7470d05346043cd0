"""IoU, AP50 and the tile-occupancy statistic N_O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Box = Sequence[float]


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@dataclass
class EvalResult:
    ap50: float
    per_class: dict[int, float]
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(repr=False)
    n_images: int = 0


def _average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the PR curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def ap50(preds, gts, num_classes: int | None = None, iou_threshold: float = 0.5) -> EvalResult:
    """AP at IoU 0.5 with greedy score-ordered matching.

    ``preds[k]`` is a list of objects with ``class_id``, ``score`` and ``box``
    for image ``k``; ``gts[k]`` is a list of ``(class_id, box)`` pairs.  Each
    prediction is compared against its best-IoU ground truth; it counts as a
    true positive only if that ground truth is still unmatched.  Classes with
    no ground truth are left out of the mean.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    classes = {int(c) for g in gts for c, _ in g}
    if num_classes is not None:
        classes = {c for c in range(num_classes) if c in classes}

    per_class, curves = {}, {}
    for c in sorted(classes):
        cand = []  # (score, serial, image, box)
        serial = 0
        n_gt = 0
        gt_boxes = []
        for k, (pk, gk) in enumerate(zip(preds, gts)):
            boxes = [b for cc, b in gk if cc == c]
            gt_boxes.append(boxes)
            n_gt += len(boxes)
            for d in pk:
                if d.class_id == c:
                    cand.append((-d.score, serial, k, d.box))
                    serial += 1
        cand.sort(key=lambda t: (t[0], t[1]))
        matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        tp = np.zeros(len(cand))
        for n, (_, _, k, box) in enumerate(cand):
            best, best_j = 0.0, -1
            for j, g in enumerate(gt_boxes[k]):
                v = iou(box, g)
                if v > best:
                    best, best_j = v, j
            if best_j >= 0 and best >= iou_threshold and not matched[k][best_j]:
                matched[k][best_j] = True
                tp[n] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(cand) + 1)
        per_class[c] = _average_precision(recall, precision) if len(cand) else 0.0
        curves[c] = (recall, precision)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(mean, per_class, curves, len(gts))


def _tile_span(lo: float, hi: float, extent: float, tiles: int) -> int:
    a = min(max(lo, 0.0), extent) * tiles / extent
    b = min(max(hi, 0.0), extent) * tiles / extent
    if b <= a:
        return 0
    return min(math.ceil(b), tiles) - max(math.floor(a), 0)


def tiles_touched(box: Box, image_size, tiles_per_axis: int) -> int:
    """Number of tiles whose intersection with ``box`` has positive area."""
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    nx = _tile_span(box[0], box[2], w, tiles_per_axis)
    ny = _tile_span(box[1], box[3], h, tiles_per_axis)
    return nx * ny


def compute_no(boxes: Sequence[Box], image_size, tiles_per_axis: int) -> float:
    """Mean number of tiles each box overlaps with positive area."""
    if tiles_per_axis < 1:
        raise ValueError(f"tiles_per_axis must be positive, got {tiles_per_axis}")
    if len(boxes) == 0:
        raise ValueError("compute_no needs at least one box")
    counts = [tiles_touched(b, image_size, tiles_per_axis) for b in boxes]
    return sum(counts) / len(counts)


NO_ADVISORY_RANGE = (1.2, 2.5)
