"""Synthetic shapes detection scenes: rectangles, circles and triangles on texture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("rectangle", "circle", "triangle")
MIN_SIDE = 8


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray  # (k, 4) x_min, y_min, x_max, y_max
    classes: np.ndarray  # (k,)
    labeled: bool = True

    def targets(self, reveal: bool = False) -> list[tuple[int, tuple[float, ...]]]:
        """Ground truth as ``(class_id, box)`` pairs.

        Unlabeled scenes keep their ground truth for evaluation only and
        refuse to hand it out unless ``reveal`` is set.
        """
        if not (self.labeled or reveal):
            raise PermissionError("ground truth of an unlabeled scene is hidden")
        return [(int(c), tuple(float(v) for v in b)) for c, b in zip(self.classes, self.boxes)]

    def hidden(self) -> "SyntheticScene":
        return SyntheticScene(self.image, self.boxes, self.classes, labeled=False)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    yy, xx = np.mgrid[0:size, 0:size] / size
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    ramp = tilt[:, 0, None, None] * (yy - 0.5) + tilt[:, 1, None, None] * (xx - 0.5)
    # coarse blotches plus fine grain
    cells = -(-size // 8)
    coarse = rng.normal(0.0, 0.06, size=(3, cells, cells))
    coarse = np.kron(coarse, np.ones((1, 8, 8)))[:, :size, :size]
    grain = rng.normal(0.0, 0.03, size=(3, size, size))
    return np.clip(base + ramp + coarse + grain, 0.0, 1.0)


def _shape_mask(cls: int, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    u = (xx - x0) / w
    v = (yy - y0) / h
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if cls == 0:
        return inside
    if cls == 1:
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    # apex at top centre, base along the bottom edge
    return inside & (np.abs(u - 0.5) <= 0.5 * v)


def render_scene(rng: np.random.Generator, size: int = 64, max_objects: int = 3,
                 side_range: tuple[int, int] = (8, 16)) -> SyntheticScene:
    img = _background(rng, size)
    n_obj = int(rng.integers(1, max_objects + 1))
    boxes, classes = [], []
    lo, hi = max(side_range[0], MIN_SIDE), min(side_range[1], size)
    for _ in range(n_obj):
        for _attempt in range(20):
            w = int(rng.integers(lo, hi + 1))
            h = int(np.clip(round(w * rng.uniform(0.75, 1.33)), lo, hi))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
            if all(_overlap_frac(box, b) < 0.2 for b in boxes):
                break
        else:
            continue
        cls = int(rng.integers(0, len(CLASS_NAMES)))
        bg = img[:, y0:y0 + h, x0:x0 + w].mean(axis=(1, 2))
        color = rng.uniform(0.0, 1.0, size=3)
        while np.abs(color - bg).max() < 0.35:
            color = rng.uniform(0.0, 1.0, size=3)
        mask = _shape_mask(cls, x0, y0, w, h, size)
        img[:, mask] = color[:, None]
        boxes.append(box)
        classes.append(cls)
    return SyntheticScene(
        img.astype(np.float32),
        np.array(boxes, dtype=np.float64).reshape(-1, 4),
        np.array(classes, dtype=np.int64),
    )


def _overlap_frac(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


def generate_scenes(seed: int | np.random.SeedSequence, n: int, image_size: int = 64,
                    **kwargs) -> list[SyntheticScene]:
    """``n`` scenes, each rendered from its own child seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [render_scene(np.random.default_rng(child), image_size, **kwargs)
            for child in ss.spawn(n)]


def generate_dataset(seed: int | np.random.SeedSequence, n_labeled: int, n_unlabeled: int,
                     image_size: int = 64, **kwargs):
    """Labeled and unlabeled splits; the unlabeled one keeps hidden ground truth."""
    if n_labeled < 0 or n_unlabeled < 0:
        raise ValueError("split sizes must be non-negative")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    lab_ss, unl_ss = ss.spawn(2)
    labeled = generate_scenes(lab_ss, n_labeled, image_size, **kwargs)
    unlabeled = [s.hidden() for s in generate_scenes(unl_ss, n_unlabeled, image_size, **kwargs)]
    return labeled, unlabeled


def stack_images(scenes) -> np.ndarray:
    return np.stack([s.image for s in scenes]).astype(np.float32)
