"""Operator surface: preprocess, anchors, synth, train, eval, detect,
bench and param-count subcommands.

Configuration is a flat ``key = value`` text file; every key can be
overridden by a command-line flag of the same name. Exit codes: 0 on
success, 1 when some inputs failed but the run completed, 2 for
configuration or contract errors.
"""

import argparse
import csv
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import data as D
from . import models as M
from .errors import CheckpointError, ConfigError, PvdetError
from .metrics import format_report, pr_curves_to_csv, report_to_csv
from .postprocess import (CONF_THRESHOLD, NMS_IOU_THRESHOLD,
                          format_detection_record)
from .train import evaluate_with_curves, predict, train_model

CONFIG_KEYS = {
    "variant": str, "data": str, "out": str, "epochs": int, "batch": int,
    "lr": float, "seed": int, "input_size": int, "width_multiple": float,
    "depth_multiple": float, "mosaic": int, "eval_every": int,
    "checkpoint_every": int, "conf": float, "iou": float, "checkpoint": str,
}


def read_config(path):
    """Flat key = value file; '#' starts a comment."""
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](val.strip())
        except ValueError as e:
            raise ConfigError(f"{path}:{ln}: bad value for {key}: {e}")
    return values


@dataclass
class RunConfig:
    variant: str = "gbh"
    data: str = ""
    out: str = "runs"
    epochs: int = 300
    batch: int = 4
    lr: float = 0.001
    seed: int = 0
    input_size: int = 0          # 0 = the variant default
    width_multiple: float = 0.0  # 0 = the variant default
    depth_multiple: float = 0.0
    mosaic: int = 1
    eval_every: int = 20
    checkpoint_every: int = 50
    conf: float = CONF_THRESHOLD
    iou: float = NMS_IOU_THRESHOLD
    checkpoint: str = ""

    def validate(self, need_data=False):
        if self.variant not in M.VARIANT_NAMES:
            raise ConfigError(f"variant must be one of {M.VARIANT_NAMES}")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError("batch and epochs must be >= 1")
        if need_data and not Path(self.data).is_dir():
            raise ConfigError(f"data directory {self.data!r} does not exist")
        return self

    def model_variant(self):
        kw = {}
        if self.input_size:
            kw["input_size"] = self.input_size
        if self.width_multiple:
            kw["width_multiple"] = self.width_multiple
        if self.depth_multiple:
            kw["depth_multiple"] = self.depth_multiple
        return M.ModelVariant(self.variant, **kw)


def _merge_config(args, need_data=False):
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values).validate(need_data)


def _add_config_flags(p, keys):
    p.add_argument("--config", help="flat key = value config file")
    for key in keys:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                       type=CONFIG_KEYS[key])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    counts = {}
    for part in (args.classes or "scratch:2,hot_spot:1").split(","):
        name, _, n = part.partition(":")
        if name.strip() not in D.CLASS_IDS:
            raise ConfigError(f"unknown class {name!r}")
        counts[name.strip()] = int(n or 1)
    images = D.synth_corpus(args.seed, args.count, size=args.size,
                            counts=counts)
    split = D.save_dataset(args.out, images, val_fraction=args.val_fraction,
                           seed=args.seed)
    print(f"wrote {len(images)} images to {args.out} "
          f"({len(split.train)} train / {len(split.val)} val)")
    return 0


def cmd_preprocess(args):
    raw_root = Path(args.raw)
    if not raw_root.is_dir():
        raise ConfigError(f"raw directory {args.raw!r} does not exist")
    ann_dir = raw_root / "annotations"
    failures = []
    crops = []
    xmls = sorted(ann_dir.glob("*.xml")) if ann_dir.is_dir() else []
    for xml in xmls:
        try:
            ann = D.parse_voc_xml(xml)
            image_id = xml.stem
            img = D.load_image(raw_root, image_id)
            raw = D.AnnotatedImage(image_id, img, ann.boxes)
            crops.extend(D.preprocess_crop(raw, crop=args.crop))
        except (PvdetError, OSError) as e:
            failures.append((xml.name, str(e)))
    if crops:
        D.save_dataset(args.out, crops, val_fraction=args.val_fraction,
                       seed=args.seed)
    else:
        D.save_dataset(args.out, [], val_fraction=0.0, seed=args.seed)
    print(f"{len(xmls)} raw frames -> {len(crops)} crops in {args.out}")
    for name, err in failures:
        print(f"error: {name}: {err}", file=sys.stderr)
    return 1 if failures else 0


def cmd_anchors(args):
    cfg = _merge_config(args, need_data=True)
    images = D.load_split(cfg.data, args.split)
    variant = cfg.model_variant()
    size = variant.input_size
    wh = []
    for ann in images:
        boxed, _ = D.letterbox_annotated(ann, size)
        wh.extend(boxed.boxes[:, 3:5].tolist())
    sets = D.adaptive_anchors(np.array(wh), heads=len(variant.head_strides),
                              strides=variant.head_strides)
    for stride, anc in zip(variant.head_strides, sets):
        pretty = ", ".join(f"({w:.1f}, {h:.1f})" for w, h in anc)
        print(f"stride {stride:2d}: {pretty}")
    if args.save:
        np.save(args.save, np.stack([np.asarray(a) for a in sets]))
        print(f"saved to {args.save}")
    return 0


def cmd_train(args):
    cfg = _merge_config(args, need_data=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    images = D.load_split(cfg.data, "train")
    if not images:
        raise ConfigError("empty training split")
    variant = cfg.model_variant()
    anchors = None
    if args.anchors:
        anchors = [a for a in np.load(args.anchors)]
    model = M.build(variant, anchors=anchors, seed=cfg.seed)

    loss_rows, pr_rows = [], []

    def on_epoch(epoch, mdl, stats):
        loss_rows.append((epoch, stats.loss, stats.box, stats.obj, stats.cls))
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            M.save_checkpoint(mdl, out / f"{cfg.variant}_e{epoch + 1}.ckpt")

    result = train_model(model, images, epochs=cfg.epochs,
                         batch_size=cfg.batch, lr=cfg.lr, seed=cfg.seed,
                         mosaic=bool(cfg.mosaic), eval_every=cfg.eval_every,
                         conf_threshold=cfg.conf, log=print,
                         on_epoch=on_epoch)
    pr_rows = result.eval_rows
    ckpt = out / f"{cfg.variant}.ckpt"
    M.save_checkpoint(model, ckpt)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "box", "obj", "cls"])
        for row in loss_rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    with open(out / "precision_recall.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "precision", "recall", "map"])
        for row in pr_rows:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args):
    cfg = _merge_config(args, need_data=True)
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = M.load_checkpoint(cfg.checkpoint, expect_variant=cfg.variant
                              if args.variant or args.config else None)
    images = D.load_split(cfg.data, args.split)
    report, evaluator = evaluate_with_curves(model, images,
                                             conf_threshold=cfg.conf,
                                             iou_threshold=cfg.iou)
    print(format_report(report))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(report))
    (out / "pr_curves.csv").write_text(pr_curves_to_csv(evaluator))
    print(f"report: {out / 'report.csv'}")
    return 0


def _draw_detections(image, dets):
    rgb = Image.fromarray(image, mode="L").convert("RGB")
    draw = ImageDraw.Draw(rgb)
    for d in dets:
        x1, y1 = d.cx - d.w / 2, d.cy - d.h / 2
        x2, y2 = d.cx + d.w / 2, d.cy + d.h / 2
        draw.rectangle([x1, y1, x2, y2], outline=(255, 64, 64), width=2)
        draw.text((x1 + 2, max(y1 - 12, 0)),
                  f"{D.CLASS_NAMES[d.class_id]} {d.confidence:.2f}",
                  fill=(255, 64, 64))
    return rgb


def cmd_detect(args):
    cfg = _merge_config(args)
    if not cfg.checkpoint:
        raise ConfigError("detect needs --checkpoint")
    model = M.load_checkpoint(cfg.checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    failures = 0
    for path in args.images:
        try:
            img = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
        except OSError as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            failures += 1
            continue
        dets, elapsed = predict(model, img, cfg.conf, cfg.iou)
        image_id = Path(path).stem
        for d in dets:
            records.append(format_detection_record(
                image_id, D.CLASS_NAMES[d.class_id], d))
        if args.save_images:
            _draw_detections(img, dets).save(out / f"{image_id}_det.png")
        print(f"{image_id}: {len(dets)} detections in {elapsed:.3f}s")
    (out / "detections.txt").write_text("".join(r + "\n" for r in records))
    if failures and failures == len(args.images):
        return 1
    return 1 if failures else 0


def cmd_bench(args):
    cfg = _merge_config(args)
    names = (args.variants or ",".join(M.VARIANT_NAMES)).split(",")
    rows = []
    size = cfg.input_size or 0
    for name in names:
        if name not in M.VARIANT_NAMES:
            raise ConfigError(f"unknown variant {name!r}")
        kw = {"input_size": size} if size else {}
        if cfg.width_multiple:
            kw["width_multiple"] = cfg.width_multiple
        variant = M.ModelVariant(name, **kw)
        model = M.build(variant, seed=cfg.seed).eval()
        s = variant.input_size
        x = np.random.default_rng(cfg.seed).standard_normal(
            (1, 3, s, s)).astype(np.float32)
        times = []
        from .tensor import Tensor, no_grad
        with no_grad():
            model(Tensor(x))  # warm-up
            for _ in range(args.reps):
                t0 = time.perf_counter()
                model(Tensor(x))
                times.append(time.perf_counter() - t0)
        rows.append((name, M.count_params(model), M.count_modules(model),
                     M.count_flops(model), float(np.median(times))))
    header = f"{'variant':<10s} {'params':>10s} {'modules':>8s} " \
             f"{'flops':>14s} {'median_s':>9s}"
    print(f"# host: {platform.platform()}, python {platform.python_version()}")
    print(header)
    for name, p, mo, fl, med in rows:
        print(f"{name:<10s} {p:>10d} {mo:>8d} {fl:>14d} {med:>9.3f}")
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "params", "modules", "flops", "median_s",
                        "host"])
            for name, p, mo, fl, med in rows:
                w.writerow([name, p, mo, fl, f"{med:.4f}",
                            platform.platform()])
    return 0


def cmd_param_count(args):
    names = (args.variants or ",".join(M.VARIANT_NAMES)).split(",")
    print(f"{'variant':<10s} {'params':>10s} {'modules':>8s} {'flops':>14s}")
    for name in names:
        if name not in M.VARIANT_NAMES:
            raise ConfigError(f"unknown variant {name!r}")
        model = M.build(M.ModelVariant(name))
        print(f"{name:<10s} {M.count_params(model):>10d} "
              f"{M.count_modules(model):>8d} {M.count_flops(model):>14d}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pvdet",
        description="photovoltaic panel surface-defect detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic defect corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", help="e.g. scratch:2,hot_spot:1")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="crop raw frames around defects")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("anchors", help="adaptive anchor computation")
    _add_config_flags(p, ["variant", "data", "input_size"])
    p.add_argument("--split", default="train")
    p.add_argument("--save")
    p.set_defaults(fn=cmd_anchors)

    p = sub.add_parser("train", help="train a variant on a corpus")
    _add_config_flags(p, ["variant", "data", "out", "epochs", "batch", "lr",
                          "seed", "input_size", "width_multiple",
                          "depth_multiple", "mosaic", "eval_every",
                          "checkpoint_every", "conf"])
    p.add_argument("--anchors", help=".npy file from the anchors command")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_config_flags(p, ["variant", "data", "out", "checkpoint", "conf",
                          "iou"])
    p.add_argument("--split", default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("detect", help="run detection on images")
    _add_config_flags(p, ["checkpoint", "out", "conf", "iou"])
    p.add_argument("images", nargs="+")
    p.add_argument("--save-images", action="store_true")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("bench", help="params/modules/flops/latency table")
    _add_config_flags(p, ["input_size", "width_multiple", "seed"])
    p.add_argument("--variants")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--out-csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("param-count", help="structural counters per variant")
    p.add_argument("--variants")
    p.set_defaults(fn=cmd_param_count)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, PvdetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
