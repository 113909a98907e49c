"""Images, manifests and the synthetic pose-jittered dataset.

Images are binary PPM (P6, 8-bit RGB). A manifest is a CSV file with header
``path,class_id,split``; paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PPM_HEADER = re.compile(rb"\AP6\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


class DataError(ValueError):
    pass


def read_ppm(path):
    """(H, W, 3) uint8 array from a binary P6 file."""
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if not m:
        raise DataError(f"{path}: not a binary P6 PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = data[m.end():]
    if len(body) < w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def write_ppm(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("rgb must be a (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb).tobytes())
    os.replace(tmp, path)


def to_tensor(rgb, mean, std):
    """uint8 (H, W, 3) -> float32 (3, H, W), scaled to [0, 1] then standardized."""
    x = rgb.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    class_id: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    num_classes: int
    image_size: int | None = None

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry):
        return self.root / entry.path


def read_manifest(path):
    path = Path(path)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "class_id", "split"]:
            raise DataError(f"{path}:1: header must be 'path,class_id,split'")
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            p, cid, split = (c.strip() for c in row)
            try:
                cid = int(cid)
            except ValueError:
                raise DataError(f"{path}:{lineno}: class_id {cid!r} is not an integer") from None
            if cid < 0:
                raise DataError(f"{path}:{lineno}: negative class_id")
            if split not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            entries.append(ManifestEntry(p, cid, split))
    if not entries:
        raise DataError(f"{path}: no entries")
    ids = sorted({e.class_id for e in entries})
    if ids != list(range(len(ids))):
        raise DataError(f"{path}: class ids are not dense in [0, K): {ids}")
    return DatasetManifest(path.parent, entries, len(ids))


def write_manifest(path, entries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path", "class_id", "split"])
        for e in entries:
            wr.writerow([e.path, e.class_id, e.split])


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int
    names: list
    rgb: list | None = None  # original uint8 pixels for overlays

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.names[i] for i in idx],
                       None if self.rgb is None else [self.rgb[i] for i in idx])


def load_split(manifest, split, mean, std, image_size=None, keep_rgb=False):
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    images, labels, names, rgbs = [], [], [], []
    for e in entries:
        rgb = read_ppm(manifest.resolve(e))
        if image_size is not None and rgb.shape[:2] != (image_size, image_size):
            raise DataError(f"{e.path}: size {rgb.shape[1]}x{rgb.shape[0]}, expected {image_size}")
        if images and rgb.shape[:2] != rgbs_shape:
            raise DataError(f"{e.path}: images differ in size")
        rgbs_shape = rgb.shape[:2]
        images.append(to_tensor(rgb, mean, std))
        labels.append(e.class_id)
        names.append(e.path)
        if keep_rgb:
            rgbs.append(rgb)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), names,
                   rgbs if keep_rgb else None)


# ---------------------------------------------------------------------------
# synthetic data

PALETTE = np.array([
    (230, 40, 40), (40, 200, 60), (50, 90, 235), (240, 220, 40),
    (220, 60, 220), (40, 220, 220), (250, 140, 20), (245, 245, 245),
], dtype=np.uint8)
BACKGROUND = (24, 24, 32)


def class_templates(num_classes, parts_per_class, rng):
    """Per class: a distinct multiset of (color index, shape, radius) parts
    and their rest positions relative to the object center."""
    templates = []
    seen = set()
    while len(templates) < num_classes:
        colors = tuple(sorted(rng.choice(len(PALETTE), size=parts_per_class, replace=False)))
        if colors in seen:
            continue
        seen.add(colors)
        shapes = rng.integers(0, 2, size=parts_per_class)  # 0 disc, 1 square
        radii = rng.integers(4, 7, size=parts_per_class)
        angle0 = rng.uniform(0, 2 * np.pi)
        angles = angle0 + 2 * np.pi * np.arange(parts_per_class) / parts_per_class
        rest = np.stack([np.sin(angles), np.cos(angles)], axis=1) * 9.0
        templates.append([(int(c), int(s), int(r), rest[k]) for k, (c, s, r)
                          in enumerate(zip(colors, shapes, radii))])
    return templates


def render(template, size, center, jitters):
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    rr, cc = np.mgrid[0:size, 0:size]
    for (color, shape, radius, rest), jit in zip(template, jitters):
        py, px = center + rest + jit
        if shape == 0:
            blob = (rr - py) ** 2 + (cc - px) ** 2 <= radius ** 2
        else:
            blob = (np.abs(rr - py) <= radius) & (np.abs(cc - px) <= radius)
        img[blob] = PALETTE[color]
    return img


def synth_images(num_classes, per_class, image_size, pose_jitter, seed, parts_per_class=3,
                 templates=None):
    """Yield ``(class_id, rgb)``; class identity lives in the part colors and
    shapes while each part is displaced independently by up to
    ``pose_jitter`` pixels and the whole object is translated."""
    rng = np.random.default_rng(seed)
    if templates is None:
        templates = class_templates(num_classes, parts_per_class, rng)
    margin = 9 + 6 + pose_jitter
    lo, hi = min(margin, image_size / 2), max(image_size - margin, image_size / 2)
    for c in range(num_classes):
        for _ in range(per_class):
            center = rng.uniform(lo, hi, size=2) if hi > lo else np.full(2, image_size / 2)
            jit = rng.uniform(-pose_jitter, pose_jitter, size=(len(templates[c]), 2))
            yield c, render(templates[c], image_size, center, jit)


def gen_data(out_dir, num_classes=3, per_class=20, image_size=64, pose_jitter=16.0, seed=0,
             test_per_class=10):
    """Write PPM images plus ``manifest.csv`` and return the manifest."""
    if num_classes < 2:
        raise DataError("need at least two classes")
    if per_class < 1 or test_per_class < 0 or image_size < 16 or pose_jitter < 0:
        raise DataError("degenerate dataset size")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes, 3, rng)
    entries = []
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for split, count, sub_seed in (("train", per_class, 1), ("test", test_per_class, 2)):
        if count == 0:
            continue
        per_cls_index = {}
        for c, rgb in synth_images(num_classes, count, image_size, pose_jitter,
                                   [seed, sub_seed], templates=templates):
            k = per_cls_index.get(c, 0)
            per_cls_index[c] = k + 1
            rel = f"images/{split}_c{c}_{k:04d}.ppm"
            write_ppm(out_dir / rel, rgb)
            entries.append(ManifestEntry(rel, c, split))
    tmp = out_dir / "manifest.csv.tmp"
    write_manifest(tmp, entries)
    os.replace(tmp, out_dir / "manifest.csv")
    return DatasetManifest(out_dir, entries, num_classes, image_size)
