"""Explanations: where each prototypical part landed, and how scores add up.

A part compared at latent position (x, y) is drawn as a square of side gamma
centred on (gamma*x, gamma*y), gamma being the image-to-latent downsampling
factor.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .data import write_ppm

# one color per part index
PART_COLORS = np.array([
    (255, 0, 0), (0, 255, 0), (0, 128, 255), (255, 255, 0), (255, 0, 255),
    (0, 255, 255), (255, 128, 0), (128, 0, 255), (255, 255, 255),
], dtype=np.uint8)
LINE_WIDTH = 2


@dataclass
class PartBox:
    part: tuple  # (row, col) index within the prototype grid
    center_row: float
    center_col: float
    side: float
    image: str | int | None = None

    @property
    def bounds(self):
        h = self.side / 2
        return (self.center_row - h, self.center_col - h, self.center_row + h, self.center_col + h)


def downsampling_factor(image_size, latent_size):
    if image_size % latent_size:
        raise ValueError(f"image size {image_size} is not a multiple of latent size {latent_size}")
    return image_size // latent_size


def part_boxes(grid, center, offsets, gamma, image=None):
    """Boxes for every part of a prototype applied at ``center`` with
    per-part ``offsets`` (rho, 2)."""
    disp = grid.displacements()
    offsets = np.asarray(offsets, dtype=np.float64).reshape(grid.rho, 2)
    a, b = center
    boxes = []
    for k, part in enumerate(grid.part_indices()):
        x = a + disp[k, 0] + offsets[k, 0]
        y = b + disp[k, 1] + offsets[k, 1]
        boxes.append(PartBox(part, float(gamma * x), float(gamma * y), float(gamma), image))
    return boxes


def _single(model, image):
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    return M.forward(model, image)


def _gamma(model, image_hw):
    h, w = image_hw
    lat = model.config.latent_size
    if h != w:
        raise ValueError("only square images are supported")
    return downsampling_factor(h, lat)


def _boxes_from_cache(model, cache, i, proto, gamma, image=None):
    lc = cache.layer
    w = lc.maps.shape[-1]
    center = divmod(int(lc.centers[i, proto]), w)
    if lc.offsets is not None:
        offs = lc.offsets[i, :, center[0], center[1]].reshape(-1, 2)
    else:
        offs = np.zeros((model.grid.rho, 2))
    return center, part_boxes(model.grid, center, offs, gamma, image)


def visualize_prototype(model, image, proto, image_id=None):
    """PartBoxes of prototype ``proto`` at its best center on ``image``."""
    gamma = _gamma(model, np.shape(image)[-2:])
    cache = _single(model, image)
    _, boxes = _boxes_from_cache(model, cache, 0, proto, gamma, image_id)
    return boxes


def source_boxes(model, proto, image_id=None):
    """Boxes on the training image a prototype was projected from."""
    rec = next((r for r in model.projections if r.prototype == proto), None)
    if rec is None:
        return None
    gamma = model.config.gamma
    return part_boxes(model.grid, rec.center, rec.offsets, gamma,
                      rec.image if image_id is None else image_id)


# ---------------------------------------------------------------------------
# reasoning


@dataclass
class ReasoningReport:
    scores: np.ndarray  # (P,)
    weights: np.ndarray  # (P, K)
    labels: list  # "c/l" per prototype
    predicted: int

    @property
    def contributions(self):
        return self.scores[:, None] * self.weights

    @property
    def class_totals(self):
        return self.contributions.sum(axis=0)

    def to_text(self):
        """One block per class: a line per prototype with its connection to
        that class, then the class total; the prediction comes last."""
        lines = []
        contrib = self.contributions
        for c in range(self.weights.shape[1]):
            for p, label in enumerate(self.labels):
                lines.append(
                    f"proto={label} score={self.scores[p]:.6f} "
                    f"weight={self.weights[p, c]:.6f} contrib={contrib[p, c]:.6f}"
                )
            lines.append(f"class={c} total={self.class_totals[c]:.6f}")
        lines.append(f"predicted={self.predicted}")
        return "\n".join(lines) + "\n"


def reasoning_report(model, image):
    cache = _single(model, image)
    scores = cache.scores[0].astype(np.float64)
    weights = model.last_layer.astype(np.float64)
    totals = scores @ weights
    return ReasoningReport(scores, weights,
                           [model.proto_label(p) for p in range(len(scores))],
                           int(np.argmax(totals)))


def parse_report(text):
    """Inverse of :meth:`ReasoningReport.to_text` for the class totals and prediction."""
    totals, predicted = {}, None
    for line in text.splitlines():
        fields = dict(item.split("=", 1) for item in line.split())
        if "class" in fields:
            totals[int(fields["class"])] = float(fields["total"])
        elif "predicted" in fields:
            predicted = int(fields["predicted"])
    return totals, predicted


# ---------------------------------------------------------------------------
# local / global analysis


@dataclass
class RankedPrototype:
    prototype: int
    label: str
    score: float
    boxes: list
    source_boxes: list | None


def local_analysis(model, image, top_k, image_id=None):
    """Prototypes ranked by score on one image, most similar first."""
    gamma = _gamma(model, np.shape(image)[-2:])
    cache = _single(model, image)
    scores = cache.scores[0]
    top_k = max(0, min(int(top_k), len(scores)))
    order = np.argsort(-scores, kind="stable")[:top_k]
    out = []
    for p in order:
        _, boxes = _boxes_from_cache(model, cache, 0, int(p), gamma, image_id)
        out.append(RankedPrototype(int(p), model.proto_label(int(p)), float(scores[p]), boxes,
                                   source_boxes(model, int(p))))
    return out


@dataclass
class RankedImage:
    image: int
    name: str
    score: float
    boxes: list


def global_analysis(model, dataset, proto, top_k):
    """Images of ``dataset`` ranked by the pooled score of prototype ``proto``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not 0 <= proto < len(model.parts):
        raise ValueError(f"prototype id {proto} out of range")
    top_k = max(0, min(int(top_k), len(dataset)))
    if top_k == 0:
        return []
    gamma = _gamma(model, dataset.images.shape[-2:])
    caches = M.compute_caches(model, dataset.images)
    scores = np.concatenate([c.scores[:, proto] for c in caches])
    order = np.argsort(-scores, kind="stable")[:top_k]
    starts = np.cumsum([0] + [len(c.scores) for c in caches])
    out = []
    for i in order:
        ci = int(np.searchsorted(starts, i, side="right") - 1)
        _, boxes = _boxes_from_cache(model, caches[ci], int(i - starts[ci]), proto, gamma,
                                     dataset.names[i])
        out.append(RankedImage(int(i), dataset.names[i], float(scores[i]), boxes))
    return out


# ---------------------------------------------------------------------------
# rendering


def draw_boxes(rgb, boxes):
    """Copy of ``rgb`` with box outlines, one color per part in order. Box
    edges are floored to pixels and clipped to the image."""
    img = np.array(rgb, dtype=np.uint8, copy=True)
    h, w = img.shape[:2]
    for k, box in enumerate(boxes):
        color = PART_COLORS[k % len(PART_COLORS)]
        r0, c0, r1, c1 = (int(np.floor(v)) for v in box.bounds)
        for rr0, rr1, cc0, cc1 in (
            (r0, r0 + LINE_WIDTH, c0, c1),
            (r1 - LINE_WIDTH, r1, c0, c1),
            (r0, r1, c0, c0 + LINE_WIDTH),
            (r0, r1, c1 - LINE_WIDTH, c1),
        ):
            rr0, rr1 = max(rr0, 0), min(rr1, h)
            cc0, cc1 = max(cc0, 0), min(cc1, w)
            if rr0 < rr1 and cc0 < cc1:
                img[rr0:rr1, cc0:cc1] = color
    return img


def boxes_text(boxes):
    lines = []
    for b in boxes:
        lines.append(
            f"part={b.part[0]},{b.part[1]} center_row={b.center_row!r} "
            f"center_col={b.center_col!r} side={b.side!r} image={b.image}"
        )
    return "\n".join(lines) + "\n"


def write_overlay(out_dir, stem, rgb, boxes):
    """Write ``stem.ppm`` (outlined boxes) and ``stem.txt`` (exact coordinates)."""
    out_dir = Path(out_dir)
    write_ppm(out_dir / f"{stem}.ppm", draw_boxes(rgb, boxes))
    side = out_dir / f"{stem}.txt"
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(boxes_text(boxes), encoding="utf-8")
    os.replace(tmp, side)
    return out_dir / f"{stem}.ppm"
