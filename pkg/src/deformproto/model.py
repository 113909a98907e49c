"""Model assembly and the three-stage training regime.

The network is a small conv/ReLU backbone, epsilon augmentation plus
per-location normalization to radius r, the deformable prototype layer and a
linear last layer. Training runs:

1. SGD on everything before the last layer, in three sub-phases
   (prototypes only; prototypes + backbone; prototypes + backbone + offset
   branch), with the last layer frozen;
2. projection of each prototype onto its best-matching training configuration;
3. optimization of the last layer alone.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import deform
from . import hypersphere as hs
from . import losses
from .config import RunConfig
from .tensor import ConvLayer, conv2d_backward, conv2d_forward, relu, relu_backward, sgd_step

log = logging.getLogger(__name__)


@dataclass
class ProjectionRecord:
    prototype: int
    image: int
    center: tuple
    offsets: np.ndarray  # (rho, 2) float32, row then column offset per part
    cosine: float


@dataclass
class Model:
    config: RunConfig
    backbone: list
    parts: np.ndarray  # (P, rho, C)
    branch: list | None
    last_layer: np.ndarray  # (P, K)
    projections: list = field(default_factory=list)

    @property
    def grid(self):
        return self.config.grid

    @property
    def radius(self):
        return self.grid.radius

    @property
    def num_classes(self):
        return self.config.num_classes

    @property
    def proto_class(self):
        return np.repeat(np.arange(self.config.num_classes), self.config.protos_per_class)

    def proto_label(self, p):
        l = self.config.protos_per_class
        return f"{p // l}/{p % l}"

    def prototype(self, p):
        g = self.grid
        l = self.config.protos_per_class
        return deform.DeformablePrototype(
            p // l, p % l, self.parts[p].reshape(g.rows, g.cols, -1), g
        )

    def copy(self):
        def cp(layers):
            if layers is None:
                return None
            return [ConvLayer(l.weight.copy(), l.bias.copy(), l.stride, l.padding, l.dilation)
                    for l in layers]

        return Model(self.config, cp(self.backbone), self.parts.copy(), cp(self.branch),
                     self.last_layer.copy(),
                     [ProjectionRecord(r.prototype, r.image, r.center, r.offsets.copy(), r.cosine)
                      for r in self.projections])

    def astype(self, dtype):
        m = self.copy()
        for layers in (m.backbone, m.branch or []):
            for l in layers:
                l.weight = l.weight.astype(dtype)
                l.bias = l.bias.astype(dtype)
        m.parts = m.parts.astype(dtype)
        m.last_layer = m.last_layer.astype(dtype)
        return m


def init_model(config, seed=None, dtype=np.float32):
    """Seeded random backbone, random parts rescaled to r, zero final offset
    conv, last layer 1 (own class) / -0.5 (other classes)."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    bb = config.backbone
    layers = []
    in_c = 3
    for out_c, stride in zip(bb.channels, bb.strides):
        std = np.sqrt(2.0 / (in_c * bb.kernel * bb.kernel))
        w = (rng.standard_normal((out_c, in_c, bb.kernel, bb.kernel)) * std).astype(dtype)
        layers.append(ConvLayer(w, np.zeros(out_c, dtype=dtype), stride=stride,
                                padding=bb.kernel // 2))
        in_c = out_c
    grid = config.grid
    dim = bb.feature_dim + 1
    raw = rng.standard_normal((config.num_prototypes, grid.rho, dim))
    parts = deform.renormalize_parts(raw, grid.radius).astype(dtype)
    branch = None
    if not config.nd:
        branch = deform.init_branch(dim, config.offset_hidden, grid.rho, rng, dtype)
    proto_class = np.repeat(np.arange(config.num_classes), config.protos_per_class)
    last = losses.init_last_layer(proto_class, config.num_classes, dtype)
    return Model(config, layers, parts, branch, last)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: list  # input of each backbone conv
    pre: list  # pre-activation of each backbone conv
    z_aug: np.ndarray
    zhat: np.ndarray
    layer: deform.LayerCache

    @property
    def scores(self):
        return self.layer.scores

    @property
    def maps(self):
        return self.layer.maps


def forward(model, images):
    x = images
    inputs, pres = [], []
    for conv in model.backbone:
        inputs.append(x)
        pre = conv2d_forward(x, conv)
        pres.append(pre)
        x = relu(pre)
    z_aug = hs.augment_epsilon(x, model.config.epsilon)
    zhat = hs.normalize_locations(z_aug, model.radius, model.grid.rho).tensor
    _, lc = deform.layer_forward(zhat, model.parts, model.grid, model.branch,
                                 interior_only=model.config.interior_only)
    return ForwardCache(inputs, pres, z_aug, zhat, lc)


@dataclass
class Grads:
    parts: np.ndarray
    backbone: list = field(default_factory=list)  # [(gW, gb)] per conv
    branch: list = field(default_factory=list)
    zhat: np.ndarray | None = None
    z: np.ndarray | None = None


def backward(model, cache, grad_maps, need_backbone=True):
    lg = deform.similarity_backward(cache.layer, grad_maps)
    grads = Grads(lg.parts, branch=lg.branch, zhat=lg.zhat)
    if not need_backbone:
        return grads
    g = hs.normalize_backward(cache.z_aug, model.radius, lg.zhat)[:, :-1]
    grads.z = g
    out = []
    for conv, x, pre in zip(reversed(model.backbone), reversed(cache.inputs), reversed(cache.pre)):
        g = relu_backward(pre, g)
        g, gw, gb = conv2d_backward(x, conv, g)
        out.append((gw, gb))
    grads.backbone = out[::-1]
    return grads


def logits(model, scores):
    return scores @ model.last_layer


# ---------------------------------------------------------------------------
# stage-1 objective


@dataclass
class Objective:
    total: float
    ce: float
    sep: float
    clst: float
    ortho: float
    grads: Grads | None = None
    cache: ForwardCache | None = None


def _batch_terms(model, images, labels, weights, need_backbone, with_grad=True):
    cache = forward(model, images)
    pc = model.proto_class
    scores = cache.scores
    mask = cache.layer.mask
    adjusted, m_centers, slope = losses.subtractive_margin_logits(
        cache.maps, labels, pc, weights.margin_phi, mask)
    if not with_grad:
        ce = losses.margin_cross_entropy(adjusted, model.last_layer, labels)
        sep = losses.separation_loss(scores, labels, pc)
        clst = losses.cluster_loss(scores, labels, pc)
        return ce, sep, clst, None, cache
    ce, g_adj, _ = losses.margin_cross_entropy(adjusted, model.last_layer, labels, grad=True)
    sep, g_sep = losses.separation_loss(scores, labels, pc, grad=True)
    clst, g_clst = losses.cluster_loss(scores, labels, pc, grad=True)
    shape = cache.maps.shape
    grad_maps = deform.scatter_to_centers(
        weights.lambda_sep * g_sep + weights.lambda_clst * g_clst, cache.layer.centers, shape)
    grad_maps += deform.scatter_to_centers(g_adj * slope, m_centers, shape)
    grads = backward(model, cache, grad_maps.astype(cache.maps.dtype), need_backbone)
    return ce, sep, clst, grads, cache


def stage1_loss(model, images, labels, weights, need_backbone=True, with_grad=True, jobs=1):
    """CE with subtractive margin + sep + clst + orthogonality, and its gradients."""
    labels = np.asarray(labels)
    n = len(labels)
    if jobs > 1 and n > 1:
        chunks = np.array_split(np.arange(n), min(jobs, n))
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(
                lambda idx: _batch_terms(model, images[idx], labels[idx], weights,
                                         need_backbone, with_grad), chunks))
        fr = [len(idx) / n for idx in chunks]
        ce = sum(f * r[0] for f, r in zip(fr, results))
        sep = sum(f * r[1] for f, r in zip(fr, results))
        clst = sum(f * r[2] for f, r in zip(fr, results))
        grads = None
        if with_grad:
            grads = _combine([r[3] for r in results], fr)
        cache = None
    else:
        ce, sep, clst, grads, cache = _batch_terms(model, images, labels, weights,
                                                   need_backbone, with_grad)
    if with_grad:
        ortho, g_ortho = losses.orthogonality_loss(model.parts, model.proto_class,
                                                   model.radius, grad=True)
        grads.parts = grads.parts + weights.lambda_ortho * g_ortho
    else:
        ortho = losses.orthogonality_loss(model.parts, model.proto_class, model.radius)
    total = ce + weights.lambda_sep * sep + weights.lambda_clst * clst + weights.lambda_ortho * ortho
    return Objective(total, ce, sep, clst, ortho, grads, cache)


def _combine(parts, fractions):
    first = parts[0]
    out = Grads(sum(f * g.parts for f, g in zip(fractions, parts)))
    out.backbone = [
        (sum(f * g.backbone[i][0] for f, g in zip(fractions, parts)),
         sum(f * g.backbone[i][1] for f, g in zip(fractions, parts)))
        for i in range(len(first.backbone))
    ]
    out.branch = [
        (sum(f * g.branch[i][0] for f, g in zip(fractions, parts)),
         sum(f * g.branch[i][1] for f, g in zip(fractions, parts)))
        for i in range(len(first.branch))
    ]
    return out


# ---------------------------------------------------------------------------
# training


class Optimizer:
    """Momentum SGD state per parameter group."""

    def __init__(self, model, momentum):
        self.momentum = momentum
        self.state = {
            "backbone": [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.backbone],
            "prototypes": np.zeros_like(model.parts),
            "offsets": [(np.zeros_like(l.weight), np.zeros_like(l.bias))
                        for l in (model.branch or [])],
        }

    def _layers(self, layers, grads, states, lr):
        new_states = []
        for layer, (gw, gb), (sw, sb) in zip(layers, grads, states):
            layer.weight, sw = sgd_step(layer.weight, gw.astype(layer.weight.dtype), lr, sw,
                                        self.momentum)
            layer.bias, sb = sgd_step(layer.bias, gb.astype(layer.bias.dtype), lr, sb,
                                      self.momentum)
            new_states.append((sw, sb))
        return new_states

    def step(self, model, grads, lrs):
        if "prototypes" in lrs:
            model.parts, self.state["prototypes"] = sgd_step(
                model.parts, grads.parts.astype(model.parts.dtype), lrs["prototypes"],
                self.state["prototypes"], self.momentum)
            model.parts = deform.renormalize_parts(model.parts, model.radius)
        if "backbone" in lrs:
            self.state["backbone"] = self._layers(model.backbone, grads.backbone,
                                                  self.state["backbone"], lrs["backbone"])
        if "offsets" in lrs and model.branch is not None:
            self.state["offsets"] = self._layers(model.branch, grads.branch,
                                                 self.state["offsets"], lrs["offsets"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_epoch(model, dataset, lrs, weights, optimizer, rng, batch_size, jobs=1, monitor=None):
    """One pass of stage-1 SGD over ``dataset``; returns mean loss components."""
    sums = np.zeros(5)
    n = len(dataset.labels)
    need_backbone = "backbone" in lrs
    for idx in _batches(n, batch_size, rng):
        obj = stage1_loss(model, dataset.images[idx], dataset.labels[idx], weights,
                          need_backbone=need_backbone, jobs=jobs)
        if monitor is not None and obj.cache is not None:
            monitor(model, obj.cache)
        optimizer.step(model, obj.grads, lrs)
        sums += len(idx) * np.array([obj.total, obj.ce, obj.sep, obj.clst, obj.ortho])
    total, ce, sep, clst, ortho = sums / n
    return {"loss": total, "ce": ce, "sep": sep, "clst": clst, "ortho": ortho}


def train_stage1(model, dataset, schedule, weights, seed=0, jobs=1, monitor=None,
                 epoch_callback=None, optimizer=None, first_epoch=1, last_epoch=None):
    """Warm-up 1, warm-up 2 and joint epochs with the last layer frozen.

    Parameters outside a sub-phase's group are never written, so they stay
    bit-identical.
    """
    if len(dataset.labels) == 0:
        raise ValueError("empty dataset")
    optimizer = optimizer or Optimizer(model, schedule.momentum)
    last_epoch = schedule.total_epochs if last_epoch is None else last_epoch
    history = []
    for epoch in range(first_epoch, last_epoch + 1):
        lrs = schedule.learning_rates(epoch)
        if model.branch is None:
            lrs.pop("offsets", None)
        rng = np.random.default_rng([seed, epoch])
        stats = train_epoch(model, dataset, lrs, weights, optimizer, rng, schedule.batch_size,
                            jobs=jobs, monitor=monitor)
        stats.update(epoch=epoch, stage=schedule.stage(epoch))
        history.append(stats)
        log.info("epoch %d %s loss=%.4f", epoch, stats["stage"], stats["loss"])
        if epoch_callback is not None:
            epoch_callback(stats)
    return model, history


# ---------------------------------------------------------------------------
# scoring, projection, last layer, evaluation


def compute_caches(model, images, batch_size=32, jobs=1):
    chunks = [np.arange(i, min(i + batch_size, len(images)))
              for i in range(0, len(images), batch_size)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(lambda idx: forward(model, images[idx]), chunks))
    return [forward(model, images[idx]) for idx in chunks]


def compute_scores(model, images, batch_size=32, jobs=1):
    caches = compute_caches(model, images, batch_size, jobs)
    return np.concatenate([c.scores for c in caches], axis=0)


ON_SPHERE_TOL = 1e-4


def project_prototypes(model, dataset, batch_size=32, jobs=1):
    """Replace each prototype by the interpolated features of its best
    (own-class training image, center), recording where they came from."""
    pc = model.proto_class
    labels = np.asarray(dataset.labels)
    for c in np.unique(pc):
        if not np.any(labels == c):
            raise ValueError(f"class {c} has no training images to project onto")
    h = w = None
    # candidates whose every sample stays on the sphere come first; a
    # configuration with parts off the grid is only used as a fallback
    best = np.full((len(pc), 2), -np.inf)
    where = [None] * len(pc)
    new_parts = model.parts.copy()
    offsets_at = [None] * len(pc)
    start = 0
    for cache in compute_caches(model, dataset.images, batch_size, jobs):
        lc = cache.layer
        b, p, h, w = lc.maps.shape
        maps = lc.maps if lc.mask is None else np.where(lc.mask, lc.maps, -np.inf)
        norms = np.linalg.norm(lc.samples, axis=2)
        on_sphere = np.all(np.abs(norms - model.radius) <= ON_SPHERE_TOL, axis=1)
        for i in range(b):
            img = start + i
            for proto in np.flatnonzero(pc == labels[img]):
                flat = maps[i, proto].reshape(-1)
                ranked = np.where(on_sphere[i].reshape(-1), flat, -np.inf)
                k = int(np.argmax(ranked))
                key = (ranked[k], flat[k]) if np.isfinite(ranked[k]) else (-np.inf, flat.max())
                if not np.isfinite(ranked[k]):
                    k = int(np.argmax(flat))
                if key[0] > best[proto, 0] or (key[0] == best[proto, 0] == -np.inf
                                              and key[1] > best[proto, 1]):
                    best[proto] = key
                    a, bb = divmod(k, w)
                    where[proto] = (img, (a, bb))
                    new_parts[proto] = lc.samples[i, :, :, a, bb]
                    if lc.offsets is not None:
                        offs = lc.offsets[i, :, a, bb].reshape(-1, 2)
                    else:
                        offs = np.zeros((model.grid.rho, 2))
                    offsets_at[proto] = offs.astype(np.float32)
        start += b
    samples = new_parts.copy()
    # a part whose sample fell entirely off the grid keeps its old value
    empty = np.linalg.norm(new_parts, axis=-1) == 0
    new_parts[empty] = model.parts[empty]
    model.parts = deform.renormalize_parts(new_parts, model.radius)
    records = []
    for proto in range(len(pc)):
        img, center = where[proto]
        # cosine at the source after the overwrite; 1 unless part of the
        # source configuration fell off the grid
        achieved = float(np.sum(model.parts[proto].astype(np.float64) * samples[proto]))
        log.debug("prototype %d: best cosine %.4f before projection", proto, best[proto].max())
        records.append(ProjectionRecord(proto, img, center, offsets_at[proto],
                                       float(np.float32(achieved))))
    model.projections = records
    return model, records


def train_last_layer(model, dataset, schedule, weights, seed=0, jobs=1, scores=None):
    """Optimize only the last layer on CE + L1(off-class connections).

    Uses proximal SGD: a gradient step on the cross entropy followed by
    soft-thresholding of the off-class entries.
    """
    if schedule.last_layer_epochs == 0:
        return model, []
    if scores is None:
        scores = compute_scores(model, dataset.images, jobs=jobs)
    labels = np.asarray(dataset.labels)
    off = losses.off_class_mask(model.proto_class, model.num_classes)
    lr = schedule.lr_last
    thresh = lr * weights.lambda_l1_last
    w = model.last_layer.copy()
    history = []
    for epoch in range(1, schedule.last_layer_epochs + 1):
        rng = np.random.default_rng([seed, 10_000 + epoch])
        for idx in _batches(len(labels), schedule.batch_size, rng):
            _, _, g_w = losses.margin_cross_entropy(scores[idx], w, labels[idx], grad=True)
            w = w - lr * g_w.astype(w.dtype)
            shrunk = np.sign(w) * np.maximum(np.abs(w) - thresh, 0)
            w = np.where(off, shrunk, w).astype(model.last_layer.dtype)
        history.append(losses.last_layer_loss(scores, w, labels, model.proto_class,
                                              weights.lambda_l1_last))
    model.last_layer = w
    return model, history


def evaluate(model, dataset, batch_size=32, jobs=1):
    """Accuracy and per-image class logits; ties go to the lowest class index."""
    scores = compute_scores(model, dataset.images, batch_size, jobs)
    class_scores = logits(model, scores)
    pred = np.argmax(class_scores, axis=1)
    acc = float(np.mean(pred == np.asarray(dataset.labels))) if len(pred) else float("nan")
    return acc, class_scores


def run_training(model, dataset, jobs=1, monitor=None, epoch_callback=None):
    """Stage 1 with projection + last-layer optimization at the configured epochs."""
    cfg = model.config
    schedule = cfg.schedule()
    weights = cfg.loss_weights()
    optimizer = Optimizer(model, schedule.momentum)
    history = []
    checkpoints = sorted(e for e in schedule.projection_epochs if 0 < e <= schedule.total_epochs)
    segments = []
    prev = 0
    for e in checkpoints + [schedule.total_epochs]:
        if e > prev:
            segments.append((prev + 1, e))
        prev = max(prev, e)
    for first, last in segments:
        _, h = train_stage1(model, dataset, schedule, weights, seed=cfg.seed, jobs=jobs,
                            monitor=monitor, epoch_callback=epoch_callback,
                            optimizer=optimizer, first_epoch=first, last_epoch=last)
        history.extend(h)
        if last in checkpoints:
            project_prototypes(model, dataset, jobs=jobs)
            train_last_layer(model, dataset, schedule, weights, seed=cfg.seed + last, jobs=jobs)
            acc, _ = evaluate(model, dataset, jobs=jobs)
            log.info("epoch %d projection + last layer, train acc %.3f", last, acc)
            if history:
                history[-1]["projected"] = True
                history[-1]["train_acc"] = acc
    return model, history
