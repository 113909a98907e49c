"""Train the default model on the synthetic jittered dataset and report accuracy.

    python3 scripts/desk_run.py --seed 0 --out runs/desk
"""

import argparse
import time
from pathlib import Path

from deformproto import model as M
from deformproto.checkpoint import save_checkpoint
from deformproto.cli import metrics_text
from deformproto.config import RunConfig
from deformproto.data import gen_data, load_split, read_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--config", help="RunConfig text file (defaults otherwise)")
    ap.add_argument("--nd", action="store_true", help="train the non-deformable variant")
    args = ap.parse_args()

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.replace(seed=args.seed, nd=args.nd or cfg.nd)
    out = Path(args.out)
    gen_data(out / "data", num_classes=cfg.num_classes, per_class=20, test_per_class=10,
             image_size=cfg.image_size, pose_jitter=2.0 * cfg.gamma, seed=args.seed)
    manifest = read_manifest(out / "data" / "manifest.csv")
    train = load_split(manifest, "train", cfg.pixel_mean, cfg.pixel_std, cfg.image_size)
    test = load_split(manifest, "test", cfg.pixel_mean, cfg.pixel_std, cfg.image_size)

    t0 = time.perf_counter()
    model, history = M.run_training(M.init_model(cfg), train, jobs=cfg.jobs)
    elapsed = time.perf_counter() - t0
    train_acc, _ = M.evaluate(model, train)
    test_acc, _ = M.evaluate(model, test)
    save_checkpoint(out / "model.dppn", model)
    (out / "metrics.tsv").write_text(metrics_text(history))
    print(f"seed {args.seed} nd={cfg.nd}: train {train_acc:.3f} test {test_acc:.3f} "
          f"({elapsed:.1f}s, {cfg.schedule().total_epochs} epochs)")


if __name__ == "__main__":
    main()
