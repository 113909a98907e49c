"""Deformable vs non-deformable test accuracy over several dataset/model seeds.

    python3 scripts/deform_vs_nd.py --seeds 5
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from deformproto import model as M
from deformproto.config import RunConfig
from deformproto.data import gen_data, load_split, read_manifest


def run(seed, nd, train, test):
    model, _ = M.run_training(M.init_model(RunConfig(seed=seed, nd=nd)), train)
    return M.evaluate(model, test)[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--jitter", type=float, help="per-part jitter in pixels (default 2 gamma)")
    args = ap.parse_args()
    cfg = RunConfig()
    jitter = 2.0 * cfg.gamma if args.jitter is None else args.jitter
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(args.seeds):
            root = Path(tmp) / str(seed)
            gen_data(root, 3, 20, cfg.image_size, jitter, seed, 10)
            m = read_manifest(root / "manifest.csv")
            train = load_split(m, "train", cfg.pixel_mean, cfg.pixel_std, cfg.image_size)
            test = load_split(m, "test", cfg.pixel_mean, cfg.pixel_std, cfg.image_size)
            rows.append((run(seed, False, train, test), run(seed, True, train, test)))
            print(f"seed {seed}: deformable {rows[-1][0]:.3f}  nd {rows[-1][1]:.3f}", flush=True)
    d, n = np.mean(rows, axis=0)
    print(f"mean: deformable {d:.3f}  nd {n:.3f}  difference {d - n:+.3f}")


if __name__ == "__main__":
    main()
