"""Command line entry point: ``dppn <command> [options]``.

Commands: gen-data, train, eval, explain, grad-check. Every command checks
its inputs before writing anything, and files are written to a temporary name
then moved into place. Logging verbosity comes from ``DPPN_LOG``
(quiet, info or debug).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import explain as ex
from . import gradcheck
from . import model as M
from .checkpoint import CheckpointError, encode_checkpoint, load_checkpoint
from .config import ConfigError, RunConfig
from .data import DataError, gen_data, load_split, read_manifest, read_ppm, to_tensor

log = logging.getLogger("deformproto")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def setup_logging(environ=None):
    environ = os.environ if environ is None else environ
    name = environ.get("DPPN_LOG", "info").strip().lower() or "info"
    if name not in LOG_LEVELS:
        raise UsageError(f"DPPN_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def atomic_write(path, data):
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _out_dir(path):
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    return path


def _config(args, manifest=None):
    cfg = RunConfig.load(args.config) if args.config else None
    if cfg is None:
        cfg = RunConfig() if manifest is None else RunConfig(num_classes=manifest.num_classes)
    elif manifest is not None and cfg.num_classes != manifest.num_classes:
        raise UsageError(f"config num_classes = {cfg.num_classes} but the manifest has "
                         f"{manifest.num_classes} classes")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        changes["jobs"] = args.jobs
    return cfg.replace(**changes) if changes else cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    out = _out_dir(args.out)
    m = gen_data(out, num_classes=args.classes, per_class=args.per_class,
                 image_size=args.image_size, pose_jitter=args.jitter, seed=args.seed or 0,
                 test_per_class=args.test_per_class)
    print(f"wrote {len(m.entries)} images and {out / 'manifest.csv'}")
    return 0


def metrics_text(history):
    cols = ["epoch", "stage", "loss", "ce", "sep", "clst", "ortho", "train_acc"]
    lines = ["\t".join(cols)]
    for h in history:
        row = [str(h["epoch"]), h["stage"]]
        row += [f"{h[k]:.6f}" for k in ("loss", "ce", "sep", "clst", "ortho")]
        row.append(f"{h['train_acc']:.4f}" if "train_acc" in h else "-")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def cmd_train(args):
    manifest = read_manifest(args.manifest)
    cfg = _config(args, manifest)
    out = _out_dir(args.out)
    train = load_split(manifest, "train", cfg.pixel_mean, cfg.pixel_std, cfg.image_size)
    if not manifest.split("test"):
        raise UsageError("the manifest has no test split")
    out.mkdir(parents=True, exist_ok=True)
    model = M.init_model(cfg)
    model, history = M.run_training(model, train, jobs=cfg.jobs)
    acc, _ = M.evaluate(model, train, jobs=cfg.jobs)
    atomic_write(out / "model.dppn", encode_checkpoint(model))
    atomic_write(out / "metrics.tsv", metrics_text(history))
    print(f"train accuracy {acc:.4f}; wrote {out / 'model.dppn'} and {out / 'metrics.tsv'}")
    return 0


def eval_rows(model, dataset):
    acc, class_scores = M.evaluate(model, dataset)
    pred = np.argmax(class_scores, axis=1)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["image", "label", "prediction", "top_score"])
    for name, label, p, s in zip(dataset.names, dataset.labels, pred, class_scores):
        wr.writerow([name, int(label), int(p), f"{float(s[p]):.6f}"])
    return acc, buf.getvalue()


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest)
    cfg = model.config
    data = load_split(manifest, args.split, cfg.pixel_mean, cfg.pixel_std, cfg.image_size)
    acc, text = eval_rows(model, data)
    if args.out:
        atomic_write(args.out, text)
    print(f"accuracy {acc:.4f} on {len(data)} {args.split} images")
    return 0


def _load_image(path, cfg):
    rgb = read_ppm(path)
    if rgb.shape[:2] != (cfg.image_size, cfg.image_size):
        raise UsageError(f"{path}: size {rgb.shape[1]}x{rgb.shape[0]}, model expects "
                         f"{cfg.image_size}")
    return rgb, to_tensor(rgb, cfg.pixel_mean, cfg.pixel_std)


def _source_rgb(model, manifest, proto):
    """Pixels of the training image prototype ``proto`` was projected from."""
    rec = next((r for r in model.projections if r.prototype == proto), None)
    if rec is None or manifest is None:
        return None, None
    train = manifest.split("train")
    if rec.image >= len(train):
        return None, None
    entry = train[rec.image]
    return read_ppm(manifest.resolve(entry)), entry.path


def cmd_explain(args):
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    out = _out_dir(args.out)
    manifest = read_manifest(args.manifest) if args.manifest else None
    if args.mode == "global":
        if args.proto is None:
            raise UsageError("--mode global needs --proto")
        if manifest is None:
            raise UsageError("--mode global needs --manifest")
        if not 0 <= args.proto < len(model.parts):
            raise UsageError(f"--proto must be in [0, {len(model.parts)})")
        data = load_split(manifest, args.split, cfg.pixel_mean, cfg.pixel_std, cfg.image_size,
                          keep_rgb=True)
        out.mkdir(parents=True, exist_ok=True)
        ranked = ex.global_analysis(model, data, args.proto, args.top_k)
        lines = []
        for rank, item in enumerate(ranked, 1):
            lines.append(f"rank={rank} image={item.name} score={item.score:.6f}")
            ex.write_overlay(out, f"global_p{args.proto}_rank{rank}", data.rgb[item.image],
                             item.boxes)
        atomic_write(out / f"global_p{args.proto}.txt", "\n".join(lines) + "\n")
        print(f"wrote {len(ranked)} ranked images to {out}")
        return 0

    if args.image is None:
        raise UsageError(f"--mode {args.mode} needs --image")
    rgb, x = _load_image(args.image, cfg)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    if args.mode == "reasoning":
        report = ex.reasoning_report(model, x)
        atomic_write(out / f"{stem}_reasoning.txt", report.to_text())
        contrib = report.contributions[:, report.predicted]
        count = 0
        for p in np.flatnonzero(contrib != 0):
            boxes = ex.visualize_prototype(model, x, int(p), image_id=args.image)
            ex.write_overlay(out, f"{stem}_p{p}", rgb, boxes)
            count += 1
        print(f"predicted class {report.predicted}; wrote report and {count} overlays to {out}")
        return 0
    ranked = ex.local_analysis(model, x, args.top_k, image_id=args.image)
    lines = []
    for rank, item in enumerate(ranked, 1):
        lines.append(f"rank={rank} proto={item.label} id={item.prototype} score={item.score:.6f}")
        ex.write_overlay(out, f"{stem}_local_rank{rank}", rgb, item.boxes)
        src, name = _source_rgb(model, manifest, item.prototype)
        if src is not None:
            boxes = ex.source_boxes(model, item.prototype, image_id=name)
            ex.write_overlay(out, f"{stem}_local_rank{rank}_source", src, boxes)
    atomic_write(out / f"{stem}_local.txt", "\n".join(lines) + "\n")
    print(f"wrote {len(ranked)} ranked prototypes to {out}")
    return 0


def cmd_grad_check(args):
    cfg = gradcheck.tiny_config(args.seed or 0)
    if args.config:
        user = RunConfig.load(args.config)
        keep = ("proto_shape", "epsilon", "phi", "lambda_sep", "lambda_clst", "lambda_ortho",
                "lambda_l1_last", "interior_only")
        cfg = cfg.replace(**{k: getattr(user, k) for k in keep})
    results = gradcheck.run_gradcheck(args.seed or 0, cfg)
    print(gradcheck.format_table(results))
    ok = all(r.passed for r in results)
    print("all groups passed" if ok else "gradient check FAILED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="dppn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic pose-jittered dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--test-per-class", type=int, default=10)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--jitter", type=float, default=16.0, help="per-part jitter in pixels")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the three training stages")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="directory for model.dppn and metrics.tsv")
    t.add_argument("--seed", type=int)
    t.add_argument("--jobs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and per-image predictions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", help="per-image CSV path")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="reasoning report, local or global analysis")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--mode", choices=("reasoning", "local", "global"), default="reasoning")
    x.add_argument("--image")
    x.add_argument("--manifest")
    x.add_argument("--split", choices=("train", "test"), default="train")
    x.add_argument("--proto", type=int)
    x.add_argument("--top-k", type=int, default=3)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)

    c = sub.add_parser("grad-check", help="finite-difference check of all backward passes")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging()
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if getattr(args, "top_k", None) is not None and args.top_k < 0:
            raise UsageError("--top-k must be >= 0")
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"dppn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
