import numpy as np
import pytest

from helpers import conv3x3_same, tile_interior
from mixunmix.augment import (
    AugmentParams,
    GroupLayout,
    ShapeError,
    cutout,
    hflip,
    hflip_boxes,
    make_layout,
    mix_tiles,
    photometric_augment,
    strong_augment,
    unmix_tiles,
    weak_augment,
)
from mixunmix.grid import MixingMaskSet


def rng(seed=0):
    return np.random.default_rng(seed)


def rand_batch(r, n, c=3, h=16, w=16):
    return r.random((n, c, h, w), dtype=np.float32)


def constant_batch(n, h, w, c=2):
    return np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None, None], (n, c, h, w)).copy()


def tile_values(x, t):
    """Mean of each tile: (n, t, t) for a batch whose tiles are constant."""
    n, c, h, w = x.shape
    return x.reshape(n, c, t, h // t, t, w // t).mean(axis=(1, 3, 5))


# --- layouts --------------------------------------------------------------

def test_layout_partitions_batch_with_remainder():
    lay = make_layout(rng(), 10, 4, 2)
    assert lay.groups == ((0, 4), (4, 8), (8, 10))
    assert [m.group_size for m in lay.masks] == [4, 4, 2]
    assert lay.batch_size == 10


def test_singleton_remainder_passes_through():
    lay = make_layout(rng(), 5, 4, 2)
    assert lay.groups[-1] == (4, 5)
    assert lay.masks[-1].is_identity()
    x = rand_batch(rng(1), 5)
    assert np.array_equal(mix_tiles(x, lay)[4], x[4])


def test_layout_validation():
    ident = MixingMaskSet.identity
    with pytest.raises(ValueError, match="only the last group"):
        GroupLayout(4, 2, ((0, 2), (2, 6)), (ident(2, 2), ident(4, 2)))
    with pytest.raises(ValueError, match="does not continue"):
        GroupLayout(2, 2, ((0, 2), (3, 5)), (ident(2, 2), ident(2, 2)))
    with pytest.raises(ValueError, match="expected"):
        GroupLayout(2, 2, ((0, 2),), (ident(2, 4),))


# --- mixing -----------------------------------------------------------------

def test_identity_masks_are_a_no_op():
    x = rand_batch(rng(), 6)
    lay = make_layout(None, 6, 4, 4)
    assert lay.is_identity()
    assert np.array_equal(mix_tiles(x, lay), x)
    assert np.array_equal(unmix_tiles(x, lay), x)


def test_single_tile_swap_exchanges_images():
    swap = MixingMaskSet(2, 1, np.array([[[1]], [[0]]]))
    lay = GroupLayout(2, 1, ((0, 2),), (swap,))
    x = rand_batch(rng(), 2)
    out = mix_tiles(x, lay)
    assert np.array_equal(out[0], x[1]) and np.array_equal(out[1], x[0])


def test_mix_readback_oracle():
    # image k is filled with the value k, so each mixed tile reads back its source index
    lay = make_layout(rng(3), 8, 4, 4)
    x = constant_batch(8, 16, 16)
    vals = tile_values(mix_tiles(x, lay), 4)
    for (start, stop), m in zip(lay.groups, lay.masks):
        assert np.array_equal(vals[start:stop], m.cells + start)


def test_unmix_readback_at_feature_stride():
    # features (4, 8, 8, 8): tiles are 2x2 at feature level
    lay = make_layout(rng(4), 4, 4, 4)
    f = constant_batch(4, 8, 8, c=8)
    vals = tile_values(unmix_tiles(f, lay), 4)
    assert np.array_equal(vals, lay.unmasks[0].cells)


def test_single_tile_unmix_is_inverse_batch_permutation():
    lay = make_layout(rng(8), 4, 4, 1)
    perm = lay.masks[0].cells[:, 0, 0]
    x = rand_batch(rng(1), 4)
    mixed = mix_tiles(x, lay)
    assert np.array_equal(mixed, x[perm])
    assert np.array_equal(unmix_tiles(x, lay), x[np.argsort(perm)])


def test_roundtrip_bitwise():
    r = rng(11)
    for n, g, t, size in [(8, 4, 4, 16), (6, 4, 8, 32), (7, 2, 2, 4), (3, 6, 1, 5)]:
        x = rand_batch(r, n, c=2, h=size, w=size)
        lay = make_layout(r, n, g, t)
        assert np.array_equal(unmix_tiles(mix_tiles(x, lay), lay), x)
        assert np.array_equal(mix_tiles(unmix_tiles(x, lay), lay), x)


def test_strided_consistency():
    # mixing at image scale then unmixing at 1/4 scale returns tiles to their owners
    lay = make_layout(rng(2), 4, 4, 4)
    x = constant_batch(4, 32, 32)
    mixed = mix_tiles(x, lay)
    pooled = mixed.reshape(4, 2, 8, 4, 8, 4).mean(axis=(3, 5))  # stride-4 average pool
    back = unmix_tiles(pooled, lay)
    assert np.array_equal(back, constant_batch(4, 8, 8))


def test_mixing_preserves_tile_multiset():
    lay = make_layout(rng(5), 4, 4, 2)
    x = rand_batch(rng(6), 4, h=8, w=8)
    out = mix_tiles(x, lay)

    def blocks(a):
        t = a.reshape(4, 3, 2, 4, 2, 4).transpose(2, 4, 0, 1, 3, 5).reshape(2, 2, 4, -1)
        return np.sort(t.view(np.uint32), axis=2)

    assert np.array_equal(blocks(out), blocks(x))


def test_pointwise_map_commutes():
    r = rng(7)
    x = rand_batch(r, 8, c=3, h=16, w=16)
    wmat = r.normal(size=(5, 3)).astype(np.float32)
    phi = lambda a: np.maximum(np.einsum("oc,nchw->nohw", wmat, a), 0)  # noqa: E731
    lay = make_layout(r, 8, 4, 4)
    assert np.array_equal(unmix_tiles(phi(mix_tiles(x, lay)), lay), phi(x))


def test_conv_interior_matches():
    r = rng(8)
    x = r.random((8, 3, 32, 32))
    w = r.normal(size=(4, 3, 3, 3))
    b = r.normal(size=4)
    lay = make_layout(r, 8, 4, 4)
    lhs = unmix_tiles(conv3x3_same(mix_tiles(x, lay), w, b), lay)
    rhs = conv3x3_same(x, w, b)
    inner = tile_interior(32, 32, 4, 1)
    assert np.max(np.abs(lhs - rhs)[..., inner]) <= 1e-6
    # sanity: tile boundaries really do differ, so the mask is doing work
    assert np.max(np.abs(lhs - rhs)[..., ~inner]) > 1e-3


def test_adjoint_identity_float64():
    r = rng(9)
    lay = make_layout(r, 8, 4, 4)
    u = r.normal(size=(8, 5, 8, 8))
    f = r.normal(size=(8, 5, 8, 8))
    assert np.sum(u * unmix_tiles(f, lay)) == pytest.approx(np.sum(mix_tiles(u, lay) * f), rel=1e-12)


def test_shape_errors_name_dimension():
    lay = make_layout(rng(), 4, 4, 4)
    with pytest.raises(ShapeError, match="height 10"):
        mix_tiles(np.zeros((4, 3, 10, 16), np.float32), lay)
    with pytest.raises(ShapeError, match="width 6"):
        unmix_tiles(np.zeros((4, 3, 8, 6), np.float32), lay)
    with pytest.raises(ShapeError, match="4-D"):
        mix_tiles(np.zeros((4, 16, 16), np.float32), lay)
    with pytest.raises(ValueError, match="layout covers 4"):
        mix_tiles(np.zeros((5, 3, 16, 16), np.float32), lay)


# --- augmentations ------------------------------------------------------------

def test_cutout_count_zero_is_identity():
    x = rand_batch(rng(), 3)
    assert np.array_equal(cutout(x, rng(1), count=0), x)


def test_cutout_full_size_blanks_image():
    x = rand_batch(rng(), 2)
    assert np.all(cutout(x, rng(1), count=1, size_range=(1.0, 1.0), fill=0.0) == 0)


def test_cutout_half_size_covers_quarter():
    x = np.ones((1, 3, 64, 64), np.float32)
    out = cutout(x, rng(3), count=1, size_range=(0.5, 0.5), fill=0.0)
    assert np.count_nonzero(out[0, 0] == 0) == 32 * 32
    # every channel gets the same rectangle and nothing else moves
    assert np.array_equal(out[0, 0] == 0, out[0, 2] == 0)


def test_cutout_argument_checks():
    x = rand_batch(rng(), 1)
    with pytest.raises(ValueError):
        cutout(x, rng(), size_range=(0.0, 0.5))
    with pytest.raises(ValueError):
        cutout(x, rng(), count=-1)


def test_hflip_twice_is_identity():
    x = rand_batch(rng(), 4)
    assert np.array_equal(hflip(hflip(x)), x)
    boxes = np.array([[1.0, 2.0, 5.0, 9.0]])
    assert np.array_equal(hflip_boxes(hflip_boxes(boxes, 16), 16), boxes)
    assert hflip_boxes(boxes, 16).tolist() == [[11.0, 2.0, 15.0, 9.0]]


def test_neutral_strong_augment_is_identity():
    p = AugmentParams(flip_prob=0.0, gain_range=(1.0, 1.0), offset_range=(0.0, 0.0),
                      cutout_count=(0, 0))
    x = rand_batch(rng(), 4)
    out, flips = strong_augment(x, rng(1), p)
    assert not flips.any()
    assert np.array_equal(out, x)


def test_weak_flip_flags_match_pixels():
    x = rand_batch(rng(), 16)
    out, flips = weak_augment(x, rng(2))
    assert 0 < flips.sum() < 16
    for k in range(16):
        assert np.array_equal(out[k], x[k, ..., ::-1] if flips[k] else x[k])


def test_strong_augment_stays_in_unit_range():
    r = rng(4)
    for _ in range(20):
        out, _ = strong_augment(rand_batch(r, 4), r)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.dtype == np.float32


def test_photometric_keeps_geometry_outside_cutout():
    p = AugmentParams(gain_range=(1.0, 1.0), offset_range=(0.0, 0.0), cutout_count=(1, 1))
    x = rand_batch(rng(), 1, h=32, w=32)
    out = photometric_augment(x, rng(5), p)
    changed = np.any(out != x, axis=1)[0]
    ys, xs = np.nonzero(changed)
    # a single axis-aligned rectangle, filled with mid-grey
    assert changed[ys.min():ys.max() + 1, xs.min():xs.max() + 1].all()
    assert np.all(out[0][:, changed] == 0.5)
