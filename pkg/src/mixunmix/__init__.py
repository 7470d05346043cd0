"""Mix image tiles / unmix feature tiles for semi-supervised detection."""

from mixunmix.grid import MixingMaskSet, generate_masks, invert_masks, validate_masks
from mixunmix.augment import GroupLayout, make_layout, mix_tiles, unmix_tiles

__all__ = [
    "MixingMaskSet",
    "GroupLayout",
    "generate_masks",
    "invert_masks",
    "validate_masks",
    "make_layout",
    "mix_tiles",
    "unmix_tiles",
]

__version__ = "0.1.0"
