"""Command-line entry point: ``mixunmix <subcommand> ...``.

Exit status is 0 on success, 1 when an argument or input fails validation
and 2 when a file cannot be read or written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from mixunmix import grid
from mixunmix.augment import GroupLayout, cutout, make_layout, mix_tiles, unmix_tiles
from mixunmix.data import generate_scenes, stack_images
from mixunmix.metrics import NO_ADVISORY_RANGE, ap50, compute_no
from mixunmix.teacher import (
    PseudoLabel,
    decay_schedule,
    ema_update,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here 2 is reserved for I/O trouble.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# --- image and document I/O -------------------------------------------------

def read_png(path: str | Path) -> np.ndarray:
    """8-bit PNG to a (3, H, W) float32 array holding ``value / 255``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path, format="PNG")


def _read_batch(paths: Sequence[str]) -> np.ndarray:
    images = [read_png(p) for p in paths]
    h, w = images[0].shape[1:]
    for p, img in zip(paths, images):
        if img.shape[1] != h:
            raise UsageError(f"--images: {p} has height {img.shape[1]}, expected {h}")
        if img.shape[2] != w:
            raise UsageError(f"--images: {p} has width {img.shape[2]}, expected {w}")
    return np.stack(images)


def _read_json(path: str | Path, flag: str):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{flag}: {path} is not valid JSON ({e})") from None


def _layout_from_masks(masks: list[grid.MixingMaskSet], n_images: int) -> GroupLayout:
    covered = sum(m.group_size for m in masks)
    if covered != n_images:
        raise UsageError(f"--masks cover {covered} images but {n_images} were given")
    groups, pos = [], 0
    for m in masks:
        groups.append((pos, pos + m.group_size))
        pos += m.group_size
    return GroupLayout(masks[0].group_size, masks[0].tiles_per_axis, tuple(groups), tuple(masks))


def _write_batch(out_dir: str | Path, batch: np.ndarray, prefix: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(batch):
        p = out / f"{prefix}_{k:03d}.png"
        write_png(p, img)
        paths.append(p)
    return paths


def _synthetic_batch(seed: int, n: int, size: int) -> np.ndarray:
    return stack_images(generate_scenes(seed, n, size))


def _positive(name: str, value: int) -> None:
    if value < 1:
        raise UsageError(f"{name} must be positive, got {value}")


# --- subcommands ----------------------------------------------------------

def cmd_mask_gen(args) -> int:
    _positive("--group", args.group)
    _positive("--tiles", args.tiles)
    rng = np.random.default_rng(args.seed)
    if args.batch is None:
        doc = grid.generate_masks(rng, args.group, args.tiles)
    else:
        _positive("--batch", args.batch)
        doc = list(make_layout(rng, args.batch, args.group, args.tiles).masks)
    grid.save(args.out, doc)
    print(f"wrote {args.out}")
    return EXIT_OK


def _mix_or_unmix(args, op, prefix) -> int:
    batch = _read_batch(args.images)
    layout = _layout_from_masks(grid.load(args.masks), len(batch))
    paths = _write_batch(args.out, op(batch, layout), prefix)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_mix(args) -> int:
    return _mix_or_unmix(args, mix_tiles, "mixed")


def cmd_unmix(args) -> int:
    return _mix_or_unmix(args, unmix_tiles, "unmixed")


def _batch_and_layout(args) -> tuple[np.ndarray, GroupLayout]:
    if args.images:
        batch = _read_batch(args.images)
    else:
        _positive("--count", args.count)
        _positive("--size", args.size)
        batch = _synthetic_batch(args.seed, args.count, args.size)
    if args.masks:
        layout = _layout_from_masks(grid.load(args.masks), len(batch))
    else:
        _positive("--group", args.group)
        _positive("--tiles", args.tiles)
        layout = make_layout(np.random.default_rng(args.seed), len(batch), args.group, args.tiles)
    return batch, layout


def cmd_roundtrip_check(args) -> int:
    batch, layout = _batch_and_layout(args)
    # quantise first so the check is about what a PNG can carry
    batch = np.rint(batch * 255.0).astype(np.float32) / np.float32(255.0)
    mixed = mix_tiles(batch, layout)
    back = unmix_tiles(mixed, layout)
    if np.array_equal(back.view(np.uint32), batch.view(np.uint32)):
        print(f"OK: {len(batch)} images, {len(layout.groups)} groups, "
              f"{layout.tiles_per_axis}x{layout.tiles_per_axis} tiles")
        return EXIT_OK
    bad = int(np.count_nonzero(back != batch))
    print(f"MISMATCH: {bad} values differ after unmix(mix(x))")
    return EXIT_INVALID


def cmd_visualize(args) -> int:
    from mixunmix import plotting

    if not args.grid:
        raise UsageError("visualize: only the --grid contact sheet is available; pass --grid")
    batch, layout = _batch_and_layout(args)
    mixed = mix_tiles(batch, layout)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(1,)))
    cut = cutout(batch, rng, count=args.cutout_count, size_range=(0.15, 0.3), fill=0.5)
    plotting.contact_sheet(
        args.out,
        [("original", batch), ("mixed", mixed), ("cutout", cut)],
        layout.tiles_per_axis,
        title=f"group {layout.group_size}, {layout.tiles_per_axis}x{layout.tiles_per_axis} tiles",
    )
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_ema_step(args) -> int:
    teacher, t_meta = load_checkpoint(args.teacher)
    student, _ = load_checkpoint(args.student)
    if args.decay is not None:
        decay = args.decay
    else:
        step = args.step if args.step is not None else int(t_meta.get("step") or 0)
        decay = decay_schedule(step, args.ramp_end, args.delta_init, args.delta_final)
    new = ema_update(teacher, student, decay)
    save_checkpoint(args.out, new, int(t_meta.get("step") or 0) + 1, decay)
    moved = float(np.linalg.norm(new.params.astype(np.float64) - teacher.params))
    gap = float(np.linalg.norm(new.params.astype(np.float64) - student.params))
    print(f"decay {decay:.6g}  |teacher change| {moved:.6g}  |teacher - student| {gap:.6g}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from mixunmix import plotting
    from mixunmix.trainer import TrainConfig, config_overrides, load_config, run_training

    cfg = load_config(args.config) if args.config else TrainConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    try:
        cfg = config_overrides(pairs, cfg)
    except KeyError as e:
        raise UsageError(f"--set: unknown config key {e.args[0]!r}") from None
    if args.supervised_only:
        cfg = cfg.replace(supervised_only=True)
    if args.no_mum:
        cfg = cfg.replace(mum_probability=0.0)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    result = run_training(cfg, out_dir=args.out)
    if result.history:
        plotting.training_curves(Path(args.out) / "curves.png", result.history,
                                 label="supervised only" if cfg.supervised_only else
                                 ("SSOD, cutout only" if cfg.mum_probability == 0 else "SSOD with tile mixing"))
        last = result.history[-1]
        print(f"step {last['step']}  AP50 teacher {last['AP50_teacher']:.4f}  "
              f"student {last['AP50_student']:.4f}")
    print(f"outputs in {args.out}")
    return EXIT_OK


def _parse_preds(doc) -> list[list[PseudoLabel]]:
    if not isinstance(doc, list):
        raise UsageError("--preds must hold one list of detections per image")
    out = []
    for k, dets in enumerate(doc):
        try:
            out.append([PseudoLabel(int(d["class_id"]), float(d["score"]),
                                    tuple(float(v) for v in d["box"])) for d in dets])
        except (KeyError, TypeError) as e:
            raise UsageError(f"--preds: image {k} has a malformed detection ({e})") from None
    return out


def _parse_gts(doc) -> list[list[tuple[int, tuple]]]:
    if not isinstance(doc, list):
        raise UsageError("--gts must hold one list of objects per image")
    out = []
    for k, objs in enumerate(doc):
        row = []
        for o in objs:
            if isinstance(o, dict):
                row.append((int(o["class_id"]), tuple(float(v) for v in o["box"])))
            elif isinstance(o, (list, tuple)) and len(o) == 2:
                row.append((int(o[0]), tuple(float(v) for v in o[1])))
            else:
                raise UsageError(f"--gts: image {k} has a malformed object {o!r}")
        out.append(row)
    return out


def cmd_eval(args) -> int:
    preds = _parse_preds(_read_json(args.preds, "--preds"))
    gts = _parse_gts(_read_json(args.gts, "--gts"))
    if len(preds) != len(gts):
        raise UsageError(f"--preds covers {len(preds)} images, --gts covers {len(gts)}")
    res = ap50(preds, gts, iou_threshold=args.iou)
    report = {"AP50": round(res.ap50, 6), "n_images": res.n_images,
              "per_class": {str(c): round(v, 6) for c, v in res.per_class.items()}}
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_no_stat(args) -> int:
    _positive("--tiles", args.tiles)
    doc = _read_json(args.boxes, "--boxes")
    if isinstance(doc, dict):
        doc = doc.get("boxes", [])
    try:
        boxes = [tuple(float(v) for v in (b["box"] if isinstance(b, dict) else b)) for b in doc]
    except (TypeError, KeyError, ValueError):
        raise UsageError("--boxes must be a JSON array of [x_min, y_min, x_max, y_max]") from None
    if not boxes:
        raise UsageError("--boxes holds no boxes")
    size = args.image_size
    for b in boxes:
        if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
            raise UsageError(f"--boxes: invalid box {list(b)}")
    value = compute_no(boxes, size, args.tiles)
    lo, hi = NO_ADVISORY_RANGE
    print(f"N_O = {value:.4f} over {len(boxes)} boxes ({args.tiles}x{args.tiles} tiles)")
    verdict = "inside" if lo <= value <= hi else "outside"
    print(f"advisory: values between {lo} and {hi} are the suggested operating range; "
          f"this one is {verdict} it (informational only)")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_batch_source(p: argparse.ArgumentParser, need_group: bool = True) -> None:
    p.add_argument("--images", nargs="+", help="input PNG files (default: synthetic scenes)")
    p.add_argument("--count", type=int, default=8, help="synthetic scenes when --images is absent")
    p.add_argument("--size", type=int, default=64, help="synthetic scene side in pixels")
    p.add_argument("--masks", help="mask file from mask-gen (default: draw from --seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--group", type=int, default=4, help="images per mixing group")
    p.add_argument("--tiles", type=int, default=4, help="tiles per image axis")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixunmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mask-gen", help="draw a tile-mixing mask set")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--group", type=int, required=True, help="group size")
    p.add_argument("--tiles", type=int, required=True, help="tiles per axis")
    p.add_argument("--batch", type=int, help="emit one mask set per group of a batch this large")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_gen)

    for name, func, helptext in (("mix", cmd_mix, "mix image tiles across groups"),
                                 ("unmix", cmd_unmix, "restore tiles to their source images")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--images", nargs="+", required=True)
        p.add_argument("--masks", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("roundtrip-check", help="verify unmix(mix(x)) == x bit for bit")
    _add_batch_source(p)
    p.set_defaults(func=cmd_roundtrip_check)

    p = sub.add_parser("visualize", help="contact sheet of originals, mixed and cutout images")
    p.add_argument("--grid", action="store_true", help="render the contact sheet")
    _add_batch_source(p)
    p.add_argument("--cutout-count", type=int, default=2)
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("ema-step", help="apply one EMA update to a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decay", type=float, help="fixed decay (default: from the schedule)")
    p.add_argument("--step", type=int, help="schedule step (default: the teacher manifest's)")
    p.add_argument("--ramp-end", type=int, default=1000)
    p.add_argument("--delta-init", type=float, default=0.5)
    p.add_argument("--delta-final", type=float, default=0.9996)
    p.set_defaults(func=cmd_ema_step)

    p = sub.add_parser("train-toy", help="train the toy detector on synthetic scenes")
    p.add_argument("--config", help="flat key = value file mirroring TrainConfig")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--supervised-only", action="store_true")
    p.add_argument("--no-mum", action="store_true", help="mixing probability 0 (cutout-only SSOD)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="AP50 of predictions against ground truth")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("no-stat", help="mean number of tiles each box overlaps")
    p.add_argument("--boxes", required=True)
    p.add_argument("--tiles", type=int, required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_no_stat)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as e:
        print(f"mixunmix {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"mixunmix {args.command}: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
