"""Tile-mixing masks.

A mask set holds, for every member ``g`` of a group and every tile position
``(i, j)``, the index of the group member whose tile is placed there.  Tiles
never move spatially, so each column ``cells[:, i, j]`` must be a permutation
of ``range(group_size)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MaskError(ValueError):
    """Raised for malformed or non-bijective mask sets."""


@dataclass(frozen=True)
class Violation:
    row: int
    col: int
    reason: str

    def __str__(self) -> str:
        return f"cell ({self.row}, {self.col}): {self.reason}"


@dataclass(frozen=True, eq=False)
class MixingMaskSet:
    group_size: int
    tiles_per_axis: int
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.shape != (self.group_size, self.tiles_per_axis, self.tiles_per_axis):
            raise MaskError(
                f"cells has shape {cells.shape}, expected "
                f"{(self.group_size, self.tiles_per_axis, self.tiles_per_axis)}"
            )
        if not np.issubdtype(cells.dtype, np.integer):
            raise MaskError(f"cells must be integers, got {cells.dtype}")
        cells = cells.astype(np.int64, copy=True)
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    def __eq__(self, other):
        if not isinstance(other, MixingMaskSet):
            return NotImplemented
        return (
            self.group_size == other.group_size
            and self.tiles_per_axis == other.tiles_per_axis
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.group_size, self.tiles_per_axis, self.cells.tobytes()))

    @classmethod
    def identity(cls, group_size: int, tiles_per_axis: int) -> "MixingMaskSet":
        cells = np.broadcast_to(
            np.arange(group_size)[:, None, None],
            (group_size, tiles_per_axis, tiles_per_axis),
        )
        return cls(group_size, tiles_per_axis, np.array(cells))

    def is_identity(self) -> bool:
        return bool(np.all(self.cells == np.arange(self.group_size)[:, None, None]))

    def to_dict(self) -> dict:
        return {
            "group_size": self.group_size,
            "tiles_per_axis": self.tiles_per_axis,
            "cells": self.cells.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixingMaskSet":
        try:
            return cls(int(d["group_size"]), int(d["tiles_per_axis"]),
                       np.asarray(d["cells"], dtype=np.int64))
        except KeyError as e:
            raise MaskError(f"mask document is missing field {e}") from None


class UnmixingMaskSet(MixingMaskSet):
    """Per-cell inverse of a mixing mask set.

    ``cells[g, i, j]`` names the mixed image holding the tile that belongs to
    original image ``g`` at ``(i, j)``.
    """


def _check_positive(name: str, value: int) -> None:
    if int(value) != value or value < 1:
        raise MaskError(f"{name} must be a positive integer, got {value!r}")


def generate_masks(rng: np.random.Generator, group_size: int, tiles_per_axis: int) -> MixingMaskSet:
    """Draw an independent uniform permutation of the group for every tile position."""
    _check_positive("group_size", group_size)
    _check_positive("tiles_per_axis", tiles_per_axis)
    base = np.broadcast_to(
        np.arange(group_size, dtype=np.int64)[:, None, None],
        (group_size, tiles_per_axis, tiles_per_axis),
    )
    return MixingMaskSet(group_size, tiles_per_axis, rng.permuted(base, axis=0))


def validate_masks(m: MixingMaskSet) -> list[Violation]:
    """Return one violation per tile position whose column is not a permutation.

    An empty list means the mask set is valid.
    """
    cells = m.cells
    out = []
    g = m.group_size
    for i in range(m.tiles_per_axis):
        for j in range(m.tiles_per_axis):
            col = cells[:, i, j]
            bad = col[(col < 0) | (col >= g)]
            if bad.size:
                out.append(Violation(i, j, f"source index {int(bad[0])} outside [0, {g})"))
                continue
            counts = np.bincount(col, minlength=g)
            if np.any(counts != 1):
                dup = int(np.flatnonzero(counts > 1)[0])
                out.append(Violation(i, j, f"source index {dup} used {int(counts[dup])} times"))
    return out


def ensure_valid(m: MixingMaskSet) -> None:
    violations = validate_masks(m)
    if violations:
        shown = "; ".join(str(v) for v in violations[:4])
        more = f" (+{len(violations) - 4} more)" if len(violations) > 4 else ""
        raise MaskError(f"mask set is not a per-cell permutation: {shown}{more}")


def invert_masks(m: MixingMaskSet) -> MixingMaskSet:
    """Per-cell inverse permutation.

    Inverting a mixing set gives an :class:`UnmixingMaskSet` and vice versa.
    """
    ensure_valid(m)
    inv = np.argsort(m.cells, axis=0, kind="stable")
    cls = MixingMaskSet if isinstance(m, UnmixingMaskSet) else UnmixingMaskSet
    return cls(m.group_size, m.tiles_per_axis, inv)


def dumps(m: MixingMaskSet | list[MixingMaskSet]) -> str:
    if isinstance(m, MixingMaskSet):
        return json.dumps(m.to_dict(), sort_keys=True)
    return json.dumps({"groups": [x.to_dict() for x in m]}, sort_keys=True)


def loads(text: str) -> list[MixingMaskSet]:
    """Parse a mask document; a single-mask document yields a one-element list."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MaskError(f"mask file is not valid JSON: {e}") from None
    if isinstance(doc, dict) and "groups" in doc:
        masks = [MixingMaskSet.from_dict(d) for d in doc["groups"]]
    elif isinstance(doc, dict):
        masks = [MixingMaskSet.from_dict(doc)]
    else:
        raise MaskError("mask document must be a JSON object")
    for m in masks:
        ensure_valid(m)
    return masks


def save(path: str | Path, m: MixingMaskSet | list[MixingMaskSet]) -> None:
    Path(path).write_text(dumps(m) + "\n")


def load(path: str | Path) -> list[MixingMaskSet]:
    return loads(Path(path).read_text())
