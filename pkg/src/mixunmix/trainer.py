"""Pseudo-label teacher-student training loop with optional tile mixing."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mixunmix import detector
from mixunmix.augment import (
    AugmentParams,
    hflip_boxes,
    make_layout,
    photometric_augment,
    strong_augment,
    weak_augment,
)
from mixunmix.data import SyntheticScene, generate_dataset, generate_scenes, stack_images
from mixunmix.detector import ToyDetArch
from mixunmix.metrics import ap50
from mixunmix.teacher import (
    ModelState,
    PseudoLabel,
    decay_schedule,
    ema_update,
    filter_pseudo_labels,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # pseudo labels / loss weighting
    tau: float = 0.7
    lambda_u: float = 4.0
    unsup_reg: bool = True
    burn_in_steps: int = 0
    unsup_ignore_score: float = 1.0
    # teacher EMA
    delta_init: float = 0.5
    delta_final: float = 0.9996
    ramp_end_step: int = 1000
    # tile mixing
    mum_probability: float = 1.0
    group_size: int = 4
    tiles_per_axis: int = 4
    force_identity_masks: bool = False
    # optimiser
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 0.0
    # run shape
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    total_steps: int = 3000
    seed: int = 0
    supervised_only: bool = False
    # data and model
    image_size: int = 64
    channels: tuple[int, ...] = (3, 16, 32, 64)
    num_classes: int = 3
    n_labeled: int = 60
    n_unlabeled: int = 540
    n_eval: int = 200
    # inference / evaluation
    score_floor: float = 0.05
    nms_iou: float = 0.5
    eval_every: int = 500
    snapshot_every: int = 0
    # augmentation recipe
    flip_prob: float = 0.5
    gain_range: tuple[float, float] = (0.6, 1.4)
    offset_range: tuple[float, float] = (-0.1, 0.1)
    cutout_count: tuple[int, int] = (1, 3)
    cutout_size: tuple[float, float] = (0.05, 0.2)
    cutout_fill: float = 0.5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        for name in ("gain_range", "offset_range", "cutout_size"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.cutout_count = tuple(int(v) for v in self.cutout_count)
        self.validate()

    def validate(self) -> None:
        for name in ("tau", "unsup_ignore_score", "mum_probability", "delta_init", "delta_final", "flip_prob", "momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.delta_init > self.delta_final:
            raise ValueError("delta_init must not exceed delta_final")
        for name in ("group_size", "tiles_per_axis", "batch_labeled", "ramp_end_step", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_unlabeled", "burn_in_steps", "total_steps", "n_labeled", "n_unlabeled", "n_eval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_u < 0 or self.lr <= 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("lambda_u, weight_decay and grad_clip must be >= 0, lr > 0")
        arch = self.arch  # raises on a stride mismatch
        if arch.feature_size % self.tiles_per_axis:
            raise ValueError(
                f"feature side {arch.feature_size} (image_size {self.image_size} / stride "
                f"{arch.stride}) is not divisible by tiles_per_axis {self.tiles_per_axis}"
            )

    @property
    def arch(self) -> ToyDetArch:
        return ToyDetArch(self.image_size, self.channels, self.num_classes)

    @property
    def augment(self) -> AugmentParams:
        return AugmentParams(self.flip_prob, self.gain_range, self.offset_range,
                             self.cutout_count, self.cutout_size, self.cutout_fill)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# --- flat key = value config files -----------------------------------------

def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_overrides(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, raw in pairs.items():
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        try:
            changes[key] = _parse_value(raw, getattr(base, key))
        except ValueError as e:
            raise ValueError(f"config key {key!r}: {e}") from None
    return base.replace(**changes)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return config_overrides(pairs, base)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --- state -----------------------------------------------------------------

@dataclass
class TrainState:
    student: ModelState
    teacher: ModelState
    velocity: np.ndarray
    step: int = 0


@dataclass
class StepLog:
    step: int
    l_s: float
    l_s_cls: float
    l_s_reg: float
    l_u: float
    l_u_cls: float
    l_u_reg: float
    total: float
    delta: float
    n_pseudo: int
    mum_applied: bool
    grad_norm: float = 0.0


def init_state(cfg: TrainConfig) -> TrainState:
    arch = cfg.arch
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    params = detector.init_params(arch, rng)
    student = ModelState(params, arch.arch_id)
    return TrainState(student, ModelState(params, arch.arch_id), np.zeros_like(params), 0)


def _step_rngs(seed: int, step: int, n: int = 6) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed, spawn_key=(1, step))
    return [np.random.default_rng(c) for c in ss.spawn(n)]


def _flip_targets(targets, flips, width):
    out = []
    for t, f in zip(targets, flips):
        if not f or not t:
            out.append(list(t))
            continue
        boxes = hflip_boxes([b for _, b in t], width)
        out.append([(c, tuple(float(v) for v in b)) for (c, _), b in zip(t, boxes)])
    return out


def teacher_pseudo_labels(params: np.ndarray, cfg: TrainConfig, images: np.ndarray):
    """Teacher inference, NMS and confidence filtering.

    Also returns the mask of dense class entries the teacher scores at or
    above ``cfg.unsup_ignore_score``; those are kept out of the unsupervised
    background loss.
    """
    pred = detector.predict(params, cfg.arch, images)
    dets = detector.decode_detections(pred, cfg.arch, cfg.score_floor, cfg.nms_iou)
    k = cfg.num_classes
    ignore = 1.0 / (1.0 + np.exp(-pred[:, :k].astype(np.float64))) >= cfg.unsup_ignore_score
    return [filter_pseudo_labels(d, cfg.tau) for d in dets], ignore


def train_step(state: TrainState, batch_labeled: Sequence[SyntheticScene],
               batch_unlabeled: Sequence[SyntheticScene], cfg: TrainConfig) -> tuple[TrainState, StepLog]:
    """One iteration: supervised loss, pseudo labels, mixed student pass, SGD and EMA."""
    arch = cfg.arch
    aug = cfg.augment
    r_lab_weak, r_lab_strong, r_unl_weak, r_unl_strong, r_mask, r_coin = _step_rngs(cfg.seed, state.step)
    params = state.student.params

    # supervised branch on weak + strong views of the labeled batch
    xs = stack_images(batch_labeled)
    ys = [s.targets() for s in batch_labeled]
    xw, fw = weak_augment(xs, r_lab_weak, aug)
    xst, fst = strong_augment(xs, r_lab_strong, aug)
    a_imgs = np.concatenate([xw, xst])
    a_tgts = _flip_targets(ys, fw, cfg.image_size) + _flip_targets(ys, fst, cfg.image_size)
    sup, grad = detector.loss_and_grad(params, arch, a_imgs, a_tgts)

    l_u_cls = l_u_reg = 0.0
    n_pseudo = 0
    mum_applied = False
    if not cfg.supervised_only and len(batch_unlabeled) and state.step >= cfg.burn_in_steps:
        xu = stack_images(batch_unlabeled)
        xb, _ = weak_augment(xu, r_unl_weak, aug)
        pseudo, ignore = teacher_pseudo_labels(state.teacher.params, cfg, xb)
        n_pseudo = sum(len(p) for p in pseudo)
        # the strong view shares the weak view's flip so pseudo boxes line up
        xc = photometric_augment(xb, r_unl_strong, aug)
        layout = None
        if r_coin.random() < cfg.mum_probability:
            mum_applied = True
            layout = make_layout(r_mask, len(xc), cfg.group_size, cfg.tiles_per_axis,
                                 identity=cfg.force_identity_masks)
        unsup, grad_u = detector.loss_and_grad(params, arch, xc, pseudo, layout,
                                               reg_weight=1.0 if cfg.unsup_reg else 0.0,
                                               ignore=ignore if ignore.any() else None)
        l_u_cls = unsup.l_cls
        l_u_reg = unsup.l_reg if cfg.unsup_reg else 0.0
        grad = grad + params.dtype.type(cfg.lambda_u) * grad_u

    l_s = sup.total
    l_u = l_u_cls + l_u_reg
    total = l_s + cfg.lambda_u * l_u
    if not (np.isfinite(total) and np.all(np.isfinite(grad))):
        raise FloatingPointError(f"step {state.step}: non-finite loss or gradient (loss={total})")

    grad_norm = float(np.linalg.norm(grad))
    if cfg.grad_clip and grad_norm > cfg.grad_clip:
        grad = grad * params.dtype.type(cfg.grad_clip / grad_norm)

    dt = params.dtype.type
    g = grad + dt(cfg.weight_decay) * params
    velocity = dt(cfg.momentum) * state.velocity + g
    new_params = params - dt(cfg.lr) * velocity
    student = ModelState(new_params, state.student.arch_id)

    delta = decay_schedule(state.step, cfg.ramp_end_step, cfg.delta_init, cfg.delta_final)
    teacher = ema_update(state.teacher, student, delta)

    entry = StepLog(state.step, l_s, sup.l_cls, sup.l_reg, l_u, l_u_cls, l_u_reg,
                    total, delta, n_pseudo, mum_applied, grad_norm)
    return TrainState(student, teacher, velocity, state.step + 1), entry


# --- evaluation and the full loop -------------------------------------------

def evaluate(params: np.ndarray, cfg: TrainConfig, scenes: Sequence[SyntheticScene],
             batch: int = 50) -> float:
    arch = cfg.arch
    preds = []
    for k in range(0, len(scenes), batch):
        chunk = scenes[k:k + batch]
        pred = detector.predict(params, arch, stack_images(chunk))
        preds.extend(detector.decode_detections(pred, arch, cfg.score_floor, cfg.nms_iou))
    gts = [s.targets(reveal=True) for s in scenes]
    return ap50(preds, gts, arch.num_classes).ap50


HISTORY_FIELDS = ("step", "l_s", "l_u", "delta", "n_pseudo", "AP50_teacher", "AP50_student")


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)
    logs: list[StepLog] = field(default_factory=list)

    @property
    def final_teacher_ap50(self) -> float:
        return self.history[-1]["AP50_teacher"] if self.history else float("nan")

    @property
    def final_student_ap50(self) -> float:
        return self.history[-1]["AP50_student"] if self.history else float("nan")


def make_splits(cfg: TrainConfig):
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(2,))
    train_ss, eval_ss = ss.spawn(2)
    labeled, unlabeled = generate_dataset(train_ss, cfg.n_labeled, cfg.n_unlabeled, cfg.image_size)
    held_out = generate_scenes(eval_ss, cfg.n_eval, cfg.image_size)
    return labeled, unlabeled, held_out


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def run_training(cfg: TrainConfig, out_dir: str | Path | None = None,
                 on_step: Callable[[StepLog], None] | None = None,
                 keep_logs: bool = False, initial_state: TrainState | None = None) -> TrainResult:
    """Run the loop up to ``cfg.total_steps`` and evaluate every ``eval_every`` steps.

    ``initial_state`` resumes from a saved state (its ``step`` counter picks
    up where it left off), so runs sharing a prefix can branch from it.  With
    ``out_dir`` the history CSV, final checkpoints and (optionally) PNG
    snapshots of mixed batches are written there.
    """
    labeled, unlabeled, held_out = make_splits(cfg)
    if not labeled:
        raise ValueError("training needs at least one labeled scene")
    state = initial_state if initial_state is not None else init_state(cfg)
    if state.student.arch_id != cfg.arch.arch_id:
        raise ValueError(f"state is for {state.student.arch_id}, config builds {cfg.arch.arch_id}")
    result = TrainResult(state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    window: list[StepLog] = []
    for t in range(state.step, cfg.total_steps):
        r_sample = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3, t)))
        bl = [labeled[i] for i in r_sample.choice(len(labeled), min(cfg.batch_labeled, len(labeled)), replace=False)]
        if unlabeled and cfg.batch_unlabeled and not cfg.supervised_only:
            idx = r_sample.choice(len(unlabeled), min(cfg.batch_unlabeled, len(unlabeled)), replace=False)
            bu = [unlabeled[i] for i in idx]
        else:
            bu = []
        state, entry = train_step(state, bl, bu, cfg)
        window.append(entry)
        if keep_logs:
            result.logs.append(entry)
        if on_step is not None:
            on_step(entry)
        if out is not None and cfg.snapshot_every and (t + 1) % cfg.snapshot_every == 0 and bu:
            from mixunmix import plotting
            plotting.mixed_batch_snapshot(out / f"mixed_{t + 1:06d}.png", stack_images(bu), cfg, t)
        last = t + 1 == cfg.total_steps
        if (t + 1) % cfg.eval_every == 0 or last:
            row = {
                "step": t + 1,
                "l_s": float(np.mean([w.l_s for w in window])),
                "l_u": float(np.mean([w.l_u for w in window])),
                "delta": entry.delta,
                "n_pseudo": int(np.sum([w.n_pseudo for w in window])),
                "AP50_teacher": evaluate(state.teacher.params, cfg, held_out),
                "AP50_student": evaluate(state.student.params, cfg, held_out),
            }
            window = []
            result.history.append(row)
            log.info("step %d  l_s %.4f  l_u %.4f  delta %.4f  pseudo %d  AP50 teacher %.4f student %.4f",
                     *(row[k] for k in HISTORY_FIELDS))
    result.state = state
    if out is not None:
        write_history(out / "metrics.csv", result.history)
        save_checkpoint(out / "student.f32", state.student, state.step)
        save_checkpoint(out / "teacher.f32", state.teacher, state.step,
                        decay_schedule(max(state.step - 1, 0), cfg.ramp_end_step,
                                       cfg.delta_init, cfg.delta_final))
        (out / "config.txt").write_text(format_config(cfg))
    return result
