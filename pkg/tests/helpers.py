"""Small reference implementations shared by the test modules."""

import numpy as np


def conv3x3_same(x, w, b):
    """Plain stride-1, zero-padded 3x3 convolution written as nine shifted sums."""
    n, c, h, wd = x.shape
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            patch = pad[:, :, dy:dy + h, dx:dx + wd]
            out += np.einsum("oc,nchw->nohw", w[:, :, dy, dx], patch)
    return out + b[None, :, None, None]


def tile_interior(h, w, tiles, margin):
    """Boolean (h, w) mask of positions at least ``margin`` pixels inside their tile."""
    th, tw = h // tiles, w // tiles
    ry = np.arange(h) % th
    rx = np.arange(w) % tw
    iy = (ry >= margin) & (ry <= th - 1 - margin)
    ix = (rx >= margin) & (rx <= tw - 1 - margin)
    return iy[:, None] & ix[None, :]


def small_arch():
    from mixunmix.detector import ToyDetArch

    return ToyDetArch(image_size=16, channels=(3, 4, 4, 4), num_classes=3)


GRADCHECK_TARGETS = [
    [(1, (1.0, 1.0, 7.0, 7.0))],
    [(0, (6.0, 2.0, 15.0, 12.0)), (2, (0.0, 9.0, 6.0, 16.0))],
    [],
    [(2, (3.0, 3.0, 13.0, 13.0))],
]


def gradcheck_point(seed=29, noise=0.02):
    """Parameters, images and a mixing layout for the finite-difference checks.

    The seed was picked so that no +-1e-3 step on any coordinate moves a ReLU
    or smooth-L1 branch across its kink; ``kink_crossings`` asserts this.
    """
    from mixunmix import detector
    from mixunmix.augment import make_layout

    arch = small_arch()
    r = np.random.default_rng(seed)
    p = detector.init_params(arch, r, np.float64)
    p = p + r.normal(0, noise, p.shape)
    x = r.random((4, 3, 16, 16))
    layout = make_layout(r, 4, 4, 2)
    return arch, p, x, layout


def branch_pattern(arch, params, x, targets, layout=None):
    """Which side of every kink (ReLU, smooth-L1) the loss evaluation sits on."""
    from mixunmix import detector
    from mixunmix.augment import mix_tiles, unmix_tiles

    p = arch.unpack(params)
    _, reg_t, pos = detector.assign_targets(targets, arch)
    xx = mix_tiles(x, layout) if layout is not None else x
    feats, caches = detector._backbone_fwd(p, arch, xx)
    acts = np.concatenate([c[1].ravel() for c in caches])
    if layout is not None:
        feats = unmix_tiles(feats, layout)
    pred, _ = detector._head_fwd(p, feats)
    diff = pred[:, arch.num_classes:] - reg_t
    quad = (np.abs(diff) < detector.SMOOTH_L1_BETA) & pos[:, None]
    return np.concatenate([acts, quad.ravel()])


def central_differences(f, params, eps=1e-3):
    out = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = eps
        out[i] = (f(params + e) - f(params - e)) / (2 * eps)
    return out


def kink_crossings(arch, params, x, targets, layout=None, eps=1e-3):
    base = branch_pattern(arch, params, x, targets, layout)
    bad = []
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = eps
        for q in (params + e, params - e):
            if not np.array_equal(branch_pattern(arch, q, x, targets, layout), base):
                bad.append(i)
                break
    return bad


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
