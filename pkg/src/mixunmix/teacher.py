"""Student/teacher parameter pair, EMA update, decay warm-up and pseudo-label filtering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class ModelState:
    params: np.ndarray
    arch_id: str

    def __post_init__(self):
        p = np.asarray(self.params)
        if p.ndim != 1:
            raise ValueError(f"params must be a flat vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("params contain non-finite values")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def __len__(self) -> int:
        return self.params.size


@dataclass(frozen=True)
class PseudoLabel:
    class_id: int
    score: float
    box: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def ema_update(teacher: ModelState, student: ModelState, decay: float) -> ModelState:
    """``teacher * decay + student * (1 - decay)``, elementwise."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    if len(teacher) != len(student):
        raise ValueError(f"teacher has {len(teacher)} params, student has {len(student)}")
    if teacher.arch_id != student.arch_id:
        raise ValueError(f"arch mismatch: {teacher.arch_id!r} vs {student.arch_id!r}")
    t = teacher.params
    d = t.dtype.type(decay)
    new = t * d + student.params.astype(t.dtype) * (t.dtype.type(1) - d)
    return ModelState(new, teacher.arch_id)


def decay_schedule(step: int, ramp_end_step: int, d_init: float = 0.5,
                   d_final: float = 0.9996) -> float:
    """Linear warm-up of the EMA decay from ``d_init`` to ``d_final``."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if ramp_end_step <= 0:
        raise ValueError(f"ramp_end_step must be positive, got {ramp_end_step}")
    if d_init > d_final:
        raise ValueError(f"d_init ({d_init}) exceeds d_final ({d_final})")
    if step >= ramp_end_step:
        return d_final
    if step == 0:
        return d_init
    return d_init + (d_final - d_init) * (step / ramp_end_step)


def filter_pseudo_labels(dets: list[PseudoLabel], tau: float) -> list[PseudoLabel]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return [d for d in dets if d.score >= tau]


def _iou_matrix(boxes: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = boxes.T
    area = (x1 - x0) * (y1 - y0)
    iw = np.clip(np.minimum(x1[:, None], x1) - np.maximum(x0[:, None], x0), 0, None)
    ih = np.clip(np.minimum(y1[:, None], y1) - np.maximum(y0[:, None], y0), 0, None)
    inter = iw * ih
    return inter / (area[:, None] + area - inter)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy class-wise NMS on arrays; returns kept indices by descending score.

    Ties in score go to the lower input index.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    boxes = np.asarray(boxes, dtype=np.float64)[order]
    classes = np.asarray(classes)[order]
    iou = _iou_matrix(boxes)
    same = classes[:, None] == classes[None, :]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for k in range(n):
        if suppressed[k]:
            continue
        keep.append(k)
        suppressed |= same[k] & (iou[k] > iou_threshold)
    return order[np.asarray(keep, dtype=np.int64)]


def nms(dets: list[PseudoLabel], iou_threshold: float = 0.5) -> list[PseudoLabel]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    return [dets[k] for k in nms_indices(boxes, scores, classes, iou_threshold)]


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str | Path, state: ModelState, step: int = 0,
                    decay: float | None = None) -> None:
    """Write ``<path>`` as little-endian float32 and ``<path>.json`` as the manifest."""
    path = Path(path)
    path.write_bytes(state.params.astype("<f4").tobytes())
    manifest = {"arch_id": state.arch_id, "length": len(state), "step": step, "decay": decay}
    Path(str(path) + ".json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    params = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32)
    if params.size != manifest["length"]:
        raise ValueError(
            f"{path}: manifest says {manifest['length']} params, file holds {params.size}"
        )
    return ModelState(params, manifest["arch_id"]), manifest
