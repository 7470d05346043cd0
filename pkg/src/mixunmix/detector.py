"""A small from-scratch convolutional detector with hand-written backprop.

Backbone: stride-2 3x3 convolutions with ReLU.  Head: a 1x1 convolution
giving per-cell class logits and four box offsets.  All parameters live in a
single flat vector so the teacher/student pair can be handled as plain
arrays.

Internally activations are kept channel-major ``(c, n, h, w)`` so each
convolution is a single GEMM; the public functions take and return NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mixunmix.augment import GroupLayout, ShapeError, mix_tiles, unmix_tiles
from mixunmix.teacher import PseudoLabel, nms_indices

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0 / 9.0
PRIOR_PROB = 0.01
INPUT_SHIFT = 0.5


@dataclass(frozen=True)
class ToyDetArch:
    image_size: int = 64
    channels: tuple[int, ...] = (3, 16, 32, 64)
    num_classes: int = 3

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("need at least one convolution")
        if self.image_size % self.stride:
            raise ValueError(
                f"image_size {self.image_size} not divisible by total stride {self.stride}"
            )

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def head_channels(self) -> int:
        return self.num_classes + 4

    @property
    def arch_id(self) -> str:
        chans = "-".join(str(c) for c in self.channels)
        return f"toydet/s{self.image_size}/c{chans}/k{self.num_classes}"

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for k, (ci, co) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            shapes.append((f"conv{k}.w", (co, ci, 3, 3)))
            shapes.append((f"conv{k}.b", (co,)))
        shapes.append(("head.w", (self.head_channels, self.feature_channels)))
        shapes.append(("head.b", (self.head_channels,)))
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``params`` keyed by layer name."""
        params = np.asarray(params)
        if params.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} params, got shape {params.shape}")
        out, pos = {}, 0
        for name, shape in self.param_shapes():
            size = int(np.prod(shape))
            out[name] = params[pos:pos + size].reshape(shape)
            pos += size
        return out

    def check_images(self, batch: np.ndarray) -> None:
        if batch.ndim != 4 or batch.shape[1:] != (self.channels[0], self.image_size, self.image_size):
            raise ShapeError(
                f"images must be (n, {self.channels[0]}, {self.image_size}, {self.image_size}), "
                f"got {batch.shape}"
            )

    def check_features(self, feats: np.ndarray) -> None:
        s = self.feature_size
        if feats.ndim != 4 or feats.shape[1:] != (self.feature_channels, s, s):
            raise ShapeError(f"features must be (n, {self.feature_channels}, {s}, {s}), got {feats.shape}")


def init_params(arch: ToyDetArch, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-normal convolutions; head biased towards background."""
    params = np.zeros(arch.num_params, dtype=np.float64)
    p = arch.unpack(params)
    for name, shape in arch.param_shapes():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in) if name.startswith("conv") else 0.01
            p[name][...] = rng.normal(0.0, std, size=shape)
    p["head.b"][:arch.num_classes] = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
    return params.astype(dtype)


# --- convolution kernels (channel-major) -----------------------------------

def _conv_fwd(x, w, b, stride=2):
    c, n, h, wd = x.shape
    co = w.shape[0]
    oh = (h - 1) // stride + 1
    ow = (wd - 1) // stride + 1
    xp = np.zeros((c, n, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, n, oh, ow), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, :, ky:ky + stride * (oh - 1) + 1:stride,
                                 kx:kx + stride * (ow - 1) + 1:stride]
    cols = cols.reshape(c * 9, n * oh * ow)
    out = w.reshape(co, -1) @ cols + b[:, None]
    return out.reshape(co, n, oh, ow), (cols, x.shape)


def _conv_bwd(dout, w, cache, stride=2, need_dx=True):
    cols, (c, n, h, wd) = cache
    co, _, oh, ow = dout.shape
    d = dout.reshape(co, -1)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(co, -1).T @ d).reshape(c, 3, 3, n, oh, ow)
    dxp = np.zeros((c, n, h + 2, wd + 2), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + stride * (oh - 1) + 1:stride,
                kx:kx + stride * (ow - 1) + 1:stride] += dcols[:, ky, kx]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _backbone_fwd(p, arch, x_nchw):
    # inputs are in [0, 1]; centring them speeds up plain SGD
    x = np.ascontiguousarray(x_nchw.transpose(1, 0, 2, 3)) - x_nchw.dtype.type(INPUT_SHIFT)
    caches = []
    for k in range(len(arch.channels) - 1):
        z, cache = _conv_fwd(x, p[f"conv{k}.w"], p[f"conv{k}.b"])
        x = np.maximum(z, 0)
        caches.append((cache, z > 0))
    return x.transpose(1, 0, 2, 3), caches


def _backbone_bwd(p, arch, caches, dfeat_nchw, grads):
    d = np.ascontiguousarray(dfeat_nchw.transpose(1, 0, 2, 3))
    for k in reversed(range(len(arch.channels) - 1)):
        cache, active = caches[k]
        d = d * active
        d, dw, db = _conv_bwd(d, p[f"conv{k}.w"], cache, need_dx=k > 0)
        grads[f"conv{k}.w"][...] = dw
        grads[f"conv{k}.b"][...] = db


def _head_fwd(p, feats):
    n, c, s, _ = feats.shape
    f = feats.transpose(1, 0, 2, 3).reshape(c, -1)
    out = p["head.w"] @ f + p["head.b"][:, None]
    return out.reshape(-1, n, s, s).transpose(1, 0, 2, 3), f


def _head_bwd(p, f, dpred, grads):
    n, o, s, _ = dpred.shape
    d = dpred.transpose(1, 0, 2, 3).reshape(o, -1)
    grads["head.w"][...] = d @ f.T
    grads["head.b"][...] = d.sum(axis=1)
    dfeat = p["head.w"].T @ d
    return dfeat.reshape(-1, n, s, s).transpose(1, 0, 2, 3)


def forward_backbone(params: np.ndarray, arch: ToyDetArch, batch: np.ndarray) -> np.ndarray:
    """Feature map of shape ``(n, C_feat, H/stride, W/stride)``."""
    p = arch.unpack(params)
    batch = np.asarray(batch)
    arch.check_images(batch)
    feats, _ = _backbone_fwd(p, arch, batch.astype(params.dtype, copy=False))
    return np.ascontiguousarray(feats)


def forward_head(params: np.ndarray, arch: ToyDetArch, features: np.ndarray) -> np.ndarray:
    """Dense predictions ``(n, num_classes + 4, S, S)``: class logits then box offsets."""
    p = arch.unpack(params)
    features = np.asarray(features)
    arch.check_features(features)
    pred, _ = _head_fwd(p, features.astype(params.dtype, copy=False))
    return np.ascontiguousarray(pred)


def predict(params: np.ndarray, arch: ToyDetArch, batch: np.ndarray,
            layout: GroupLayout | None = None) -> np.ndarray:
    """Backbone, optional mix/unmix around it, then head."""
    if layout is not None:
        batch = mix_tiles(batch, layout)
    feats = forward_backbone(params, arch, batch)
    if layout is not None:
        feats = unmix_tiles(feats, layout)
    return forward_head(params, arch, feats)


# --- targets and losses ----------------------------------------------------

def _pairs(targets) -> list[tuple[int, tuple[float, float, float, float]]]:
    out = []
    for t in targets:
        if isinstance(t, PseudoLabel) or hasattr(t, "box"):
            out.append((int(t.class_id), tuple(map(float, t.box))))
        else:
            c, box = t
            out.append((int(c), tuple(map(float, box))))
    return out


def cell_centers(arch: ToyDetArch) -> np.ndarray:
    return (np.arange(arch.feature_size) + 0.5) * arch.stride


def assign_targets(targets_per_image: Sequence, arch: ToyDetArch):
    """Per-cell class target, box regression target and positive mask.

    A cell is positive when its centre lies inside a box (edges inclusive);
    where boxes overlap the smallest one wins.  Regression targets are the
    centre offset in units of stride and the log of box size over stride.
    """
    n = len(targets_per_image)
    s, k, stride = arch.feature_size, arch.num_classes, arch.stride
    centers = cell_centers(arch)
    cls_t = np.zeros((n, k, s, s))
    reg_t = np.zeros((n, 4, s, s))
    pos = np.zeros((n, s, s), dtype=bool)
    for i, targets in enumerate(targets_per_image):
        best_area = np.full((s, s), np.inf)
        owner = np.full((s, s), -1)
        pairs = _pairs(targets)
        for b, (c, (x0, y0, x1, y1)) in enumerate(pairs):
            if not 0 <= c < k:
                raise ValueError(f"class id {c} outside [0, {k})")
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate box {(x0, y0, x1, y1)}")
            inside = ((centers[:, None] >= y0) & (centers[:, None] <= y1)
                      & (centers[None, :] >= x0) & (centers[None, :] <= x1))
            area = (x1 - x0) * (y1 - y0)
            take = inside & (area < best_area)
            best_area[take] = area
            owner[take] = b
        for b, (c, (x0, y0, x1, y1)) in enumerate(pairs):
            m = owner == b
            if not m.any():
                continue
            pos[i][m] = True
            cls_t[i, c][m] = 1.0
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            reg_t[i, 0][m] = ((cx - centers[None, :]) / stride * np.ones((s, 1)))[m]
            reg_t[i, 1][m] = ((cy - centers[:, None]) / stride * np.ones((1, s)))[m]
            reg_t[i, 2][m] = np.log((x1 - x0) / stride)
            reg_t[i, 3][m] = np.log((y1 - y0) / stride)
    return cls_t, reg_t, pos


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_loss_terms(logits: np.ndarray, targets: np.ndarray):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits."""
    p = 1.0 / (1.0 + np.exp(-logits))
    log_p = -_softplus(-logits)
    log_q = -_softplus(logits)
    q = 1.0 - p
    pos = FOCAL_ALPHA * q ** FOCAL_GAMMA * -log_p
    neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * -log_q
    d_pos = FOCAL_ALPHA * q ** FOCAL_GAMMA * (FOCAL_GAMMA * p * log_p - q)
    d_neg = -(1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (FOCAL_GAMMA * q * log_q - p)
    loss = np.where(targets > 0, pos, neg)
    grad = np.where(targets > 0, d_pos, d_neg)
    return loss, grad


def smooth_l1_terms(diff: np.ndarray, beta: float = SMOOTH_L1_BETA):
    a = np.abs(diff)
    loss = np.where(a < beta, 0.5 * diff ** 2 / beta, a - 0.5 * beta)
    grad = np.where(a < beta, diff / beta, np.sign(diff))
    return loss, grad


def loss_and_pred_grad(pred: np.ndarray, targets_per_image: Sequence, arch: ToyDetArch,
                       reg_weight: float = 1.0, ignore: np.ndarray | None = None):
    """Return ``(l_cls, l_reg, d(l_cls + reg_weight * l_reg)/d pred)``.

    Both terms are summed over the batch.  The regression term is divided by
    the number of positive cells (1 when there are none); the classification
    term by the larger of that count and the number of images, so a batch with
    no objects is not weighted far above one with many.

    ``ignore`` is an optional boolean ``(n, num_classes, S, S)`` mask of
    class-logit entries to leave out of the classification loss; it never
    removes an entry that a target assigns as positive.
    """
    pred = np.asarray(pred)
    n = pred.shape[0]
    if len(targets_per_image) != n:
        raise ValueError(f"{len(targets_per_image)} target lists for a batch of {n}")
    k = arch.num_classes
    cls_t, reg_t, pos = assign_targets(targets_per_image, arch)
    norm = max(int(pos.sum()), 1)
    cls_norm = max(norm, n)
    logits = pred[:, :k].astype(np.float64)
    fl, dfl = focal_loss_terms(logits, cls_t)
    if ignore is not None:
        keep = ~(np.asarray(ignore, dtype=bool) & (cls_t == 0))
        fl, dfl = fl * keep, dfl * keep
    l_cls = fl.sum() / cls_norm
    diff = pred[:, k:].astype(np.float64) - reg_t
    sl, dsl = smooth_l1_terms(diff)
    mask = pos[:, None]
    l_reg = (sl * mask).sum() / norm
    dpred = np.empty(pred.shape, dtype=np.float64)
    dpred[:, :k] = dfl / cls_norm
    dpred[:, k:] = reg_weight * dsl * mask / norm
    return float(l_cls), float(l_reg), dpred.astype(pred.dtype)


def detection_loss(pred: np.ndarray, targets_per_image: Sequence, arch: ToyDetArch) -> tuple[float, float]:
    l_cls, l_reg, _ = loss_and_pred_grad(pred, targets_per_image, arch)
    return l_cls, l_reg


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float

    @property
    def total(self) -> float:
        return self.l_cls + self.l_reg


def loss_and_grad(params: np.ndarray, arch: ToyDetArch, batch: np.ndarray, targets_per_image,
                  layout: GroupLayout | None = None, reg_weight: float = 1.0,
                  ignore: np.ndarray | None = None):
    """Loss and exact gradient w.r.t. every parameter.

    With a ``layout`` the images are mixed before the backbone and the
    features unmixed after it; the gradient flows back through the unmix as
    the corresponding mix.
    """
    p = arch.unpack(params)
    batch = np.asarray(batch)
    arch.check_images(batch)
    x = batch.astype(params.dtype, copy=False)
    if layout is not None:
        x = mix_tiles(x, layout)
    feats, caches = _backbone_fwd(p, arch, x)
    if layout is not None:
        feats = unmix_tiles(feats, layout)
    pred, f = _head_fwd(p, feats)
    l_cls, l_reg, dpred = loss_and_pred_grad(pred, targets_per_image, arch, reg_weight, ignore)

    grad = np.zeros_like(params)
    g = arch.unpack(grad)
    dfeat = _head_bwd(p, f, dpred, g)
    if layout is not None:
        dfeat = mix_tiles(dfeat, layout)
    _backbone_bwd(p, arch, caches, dfeat, g)
    return LossBreakdown(l_cls, l_reg), grad


def backward(params: np.ndarray, arch: ToyDetArch, batch: np.ndarray, targets_per_image,
             layout: GroupLayout | None = None) -> np.ndarray:
    """Gradient of ``l_cls + l_reg`` w.r.t. ``params``."""
    return loss_and_grad(params, arch, batch, targets_per_image, layout)[1]


def total_loss(params: np.ndarray, arch: ToyDetArch, batch: np.ndarray, targets_per_image,
               layout: GroupLayout | None = None) -> float:
    pred = predict(params, arch, batch, layout)
    l_cls, l_reg = detection_loss(pred, targets_per_image, arch)
    return l_cls + l_reg


# --- decoding --------------------------------------------------------------

def decode_boxes(reg: np.ndarray, arch: ToyDetArch) -> np.ndarray:
    """``(n, 4, S, S)`` offsets to ``(n, S, S, 4)`` corner boxes clipped to the image."""
    stride, size = arch.stride, float(arch.image_size)
    centers = cell_centers(arch)
    reg = reg.astype(np.float64)
    cx = centers[None, None, :] + reg[:, 0] * stride
    cy = centers[None, :, None] + reg[:, 1] * stride
    limit = np.log(size / stride) + 1.0
    w = stride * np.exp(np.clip(reg[:, 2], -limit, limit))
    h = stride * np.exp(np.clip(reg[:, 3], -limit, limit))
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(boxes, 0.0, size)


def decode_detections(pred: np.ndarray, arch: ToyDetArch, score_floor: float = 0.05,
                      nms_iou: float = 0.5, max_per_image: int = 100) -> list[list[PseudoLabel]]:
    """Sigmoid scores, box decoding, score floor and class-wise NMS, per image."""
    pred = np.asarray(pred)
    if pred.size == 0:
        return [[] for _ in range(pred.shape[0] if pred.ndim else 0)]
    k = arch.num_classes
    scores = 1.0 / (1.0 + np.exp(-pred[:, :k].astype(np.float64)))
    boxes = decode_boxes(pred[:, k:], arch)
    out = []
    for i in range(pred.shape[0]):
        cls_idx, yy, xx = np.nonzero(scores[i] >= score_floor)
        sc = scores[i][cls_idx, yy, xx]
        bx = boxes[i][yy, xx]
        ok = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
        cls_idx, sc, bx = cls_idx[ok], sc[ok], bx[ok]
        if sc.size > 4 * max_per_image:
            top = np.argsort(-sc, kind="stable")[:4 * max_per_image]
            top.sort()
            cls_idx, sc, bx = cls_idx[top], sc[top], bx[top]
        keep = nms_indices(bx, sc, cls_idx, nms_iou)[:max_per_image]
        out.append([PseudoLabel(int(cls_idx[j]), float(sc[j]), tuple(float(v) for v in bx[j]))
                    for j in keep])
    return out
