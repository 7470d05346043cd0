"""Batched NCHW kernels: tile mixing/unmixing plus the weak/strong augmentations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mixunmix.grid import MixingMaskSet, ensure_valid, generate_masks, invert_masks


class ShapeError(ValueError):
    """Raised when a tensor shape does not fit the tile grid or the layout."""


def check_tensor4(x: np.ndarray, name: str = "batch") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass(frozen=True)
class GroupLayout:
    """Partition of a batch into mixing groups, with one mask set per group.

    ``groups`` holds ``(start, stop)`` ranges.  All groups have ``group_size``
    members except possibly a trailing remainder.
    """

    group_size: int
    tiles_per_axis: int
    groups: tuple[tuple[int, int], ...]
    masks: tuple[MixingMaskSet, ...]
    unmasks: tuple[MixingMaskSet, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.groups) != len(self.masks):
            raise ValueError(f"{len(self.groups)} groups but {len(self.masks)} mask sets")
        pos = 0
        for k, ((start, stop), m) in enumerate(zip(self.groups, self.masks)):
            if start != pos or stop <= start:
                raise ValueError(f"group {k} range {(start, stop)} does not continue at {pos}")
            size = stop - start
            if size > self.group_size:
                raise ValueError(f"group {k} has {size} members, group_size is {self.group_size}")
            if size < self.group_size and k != len(self.groups) - 1:
                raise ValueError(f"only the last group may be short; group {k} has {size}")
            if m.group_size != size or m.tiles_per_axis != self.tiles_per_axis:
                raise ValueError(
                    f"group {k}: mask is {m.group_size}x{m.tiles_per_axis}, "
                    f"expected {size}x{self.tiles_per_axis}"
                )
            ensure_valid(m)
            pos = stop
        object.__setattr__(self, "unmasks", tuple(invert_masks(m) for m in self.masks))

    @property
    def batch_size(self) -> int:
        return self.groups[-1][1] if self.groups else 0

    def is_identity(self) -> bool:
        return all(m.is_identity() for m in self.masks)


def _ranges(batch_size: int, group_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + group_size, batch_size)) for s in range(0, batch_size, group_size)]


def make_layout(rng: np.random.Generator | None, batch_size: int, group_size: int,
                tiles_per_axis: int, identity: bool = False) -> GroupLayout:
    """Split ``batch_size`` images into groups and draw masks for each group.

    A remainder group of one image gets the identity mask.  With
    ``identity=True`` (or ``rng=None``) every mask is the identity and no
    random numbers are consumed.
    """
    if batch_size < 1 or group_size < 1 or tiles_per_axis < 1:
        raise ValueError("batch_size, group_size and tiles_per_axis must be positive")
    groups = _ranges(batch_size, group_size)
    masks = []
    for start, stop in groups:
        size = stop - start
        if identity or rng is None or size == 1:
            masks.append(MixingMaskSet.identity(size, tiles_per_axis))
        else:
            masks.append(generate_masks(rng, size, tiles_per_axis))
    return GroupLayout(group_size, tiles_per_axis, tuple(groups), tuple(masks))


def _check_fit(x: np.ndarray, layout: GroupLayout, name: str) -> None:
    x = check_tensor4(x, name)
    n, _, h, w = x.shape
    t = layout.tiles_per_axis
    if h % t:
        raise ShapeError(f"{name} height {h} is not divisible by tiles_per_axis {t}")
    if w % t:
        raise ShapeError(f"{name} width {w} is not divisible by tiles_per_axis {t}")
    if n != layout.batch_size:
        raise ValueError(f"{name} has {n} images but the layout covers {layout.batch_size}")


def _permute_tiles(x: np.ndarray, layout: GroupLayout, masks) -> np.ndarray:
    n, c, h, w = x.shape
    t = layout.tiles_per_axis
    th, tw = h // t, w // t
    out = np.empty_like(x)
    ii = np.arange(t)[None, :, None]
    jj = np.arange(t)[None, None, :]
    for (start, stop), m in zip(layout.groups, masks):
        g = stop - start
        # (g, c, t, th, t, tw) -> (g, t, t, c, th, tw)
        tiles = x[start:stop].reshape(g, c, t, th, t, tw).transpose(0, 2, 4, 1, 3, 5)
        picked = tiles[m.cells, ii, jj]
        out[start:stop] = picked.transpose(0, 3, 1, 4, 2, 5).reshape(g, c, h, w)
    return out


def mix_tiles(batch: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Build mixed images: output ``g`` takes tile ``(i, j)`` from member ``cells[g, i, j]``."""
    _check_fit(batch, layout, "batch")
    return _permute_tiles(np.asarray(batch), layout, layout.masks)


def unmix_tiles(features: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Return feature tiles to their source images.

    Works at any resolution whose sides are divisible by the tile count, so
    the same layout serves images and strided feature maps.
    """
    _check_fit(features, layout, "features")
    return _permute_tiles(np.asarray(features), layout, layout.unmasks)


# --- photometric and geometric augmentations -------------------------------

def hflip(batch: np.ndarray, which: np.ndarray | None = None) -> np.ndarray:
    batch = check_tensor4(batch)
    if which is None:
        return batch[..., ::-1].copy()
    out = batch.copy()
    out[which] = batch[which][..., ::-1]
    return out


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    """Mirror ``(x_min, y_min, x_max, y_max)`` rows across the vertical axis."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([width - boxes[:, 2], boxes[:, 1], width - boxes[:, 0], boxes[:, 3]], axis=1)


def cutout(batch: np.ndarray, rng: np.random.Generator, count: int = 1,
           size_range: tuple[float, float] = (0.05, 0.2), fill: float = 0.5) -> np.ndarray:
    """Overwrite ``count`` random rectangles per image with ``fill``.

    Side lengths are drawn as fractions of the image height and width from
    ``size_range``; rectangles lie fully inside the image.
    """
    batch = check_tensor4(batch)
    lo, hi = size_range
    if not (0 < lo <= hi <= 1):
        raise ValueError(f"size_range must satisfy 0 < lo <= hi <= 1, got {size_range}")
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    out = batch.copy()
    n, _, h, w = batch.shape
    for k in range(n):
        for _ in range(count):
            rh = max(1, int(round(rng.uniform(lo, hi) * h)))
            rw = max(1, int(round(rng.uniform(lo, hi) * w)))
            y0 = int(rng.integers(0, h - rh + 1))
            x0 = int(rng.integers(0, w - rw + 1))
            out[k, :, y0:y0 + rh, x0:x0 + rw] = fill
    return out


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    gain_range: tuple[float, float] = (0.6, 1.4)
    offset_range: tuple[float, float] = (-0.1, 0.1)
    cutout_count: tuple[int, int] = (1, 3)
    cutout_size: tuple[float, float] = (0.05, 0.2)
    cutout_fill: float = 0.5


def weak_augment(batch: np.ndarray, rng: np.random.Generator,
                 params: AugmentParams = AugmentParams()) -> tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip. Returns the images and the per-image flip flags."""
    batch = check_tensor4(batch)
    flips = rng.random(batch.shape[0]) < params.flip_prob
    return hflip(batch, flips), flips


def photometric_augment(batch: np.ndarray, rng: np.random.Generator,
                        params: AugmentParams = AugmentParams()) -> np.ndarray:
    """Per-channel gain/offset jitter clamped to [0, 1], then Cutout."""
    batch = check_tensor4(batch)
    n, c = batch.shape[:2]
    gain = rng.uniform(*params.gain_range, size=(n, c, 1, 1)).astype(batch.dtype)
    offset = rng.uniform(*params.offset_range, size=(n, c, 1, 1)).astype(batch.dtype)
    out = np.clip(batch * gain + offset, 0.0, 1.0).astype(batch.dtype, copy=False)
    lo, hi = params.cutout_count
    for k in range(n):
        count = int(rng.integers(lo, hi + 1))
        if count:
            out[k:k + 1] = cutout(out[k:k + 1], rng, count, params.cutout_size, params.cutout_fill)
    return out


def strong_augment(batch: np.ndarray, rng: np.random.Generator,
                   params: AugmentParams = AugmentParams()) -> tuple[np.ndarray, np.ndarray]:
    """Weak augmentation followed by :func:`photometric_augment`."""
    out, flips = weak_augment(batch, rng, params)
    return photometric_augment(out, rng, params), flips
