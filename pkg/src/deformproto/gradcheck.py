"""Finite-difference verification of every hand-written backward pass.

A tiny random model is built in float64 and each parameter group is checked
coordinate by coordinate against central differences. The loss is only
piecewise smooth (ReLU, max pooling, floor in the interpolation, the margin
clamp), so a coordinate whose +-h perturbation changes any of those discrete
choices is skipped rather than compared: there the difference quotient
straddles a kink and says nothing about the derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hypersphere as hs
from . import losses
from . import model as M
from .config import RunConfig

STEP = 1e-3
TOLERANCE = 1e-3
# denominators below this are treated as this, so gradients under 1e-2 are
# held to an absolute error of 1e-5 (the usual rtol/atol gradcheck pairing);
# below that the O(h^2) truncation of the difference quotient dominates
SCALE_FLOOR = 1e-2

GROUPS = (
    "backbone", "normalization", "interp_features", "interp_delta1", "interp_delta2",
    "parts", "offset_branch", "last_layer",
)


@dataclass
class GroupResult:
    name: str
    checked: int
    skipped: int
    max_rel_err: float
    max_abs_err: float

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_err <= TOLERANCE


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), SCALE_FLOOR)


def tiny_config(seed=0):
    return RunConfig(
        num_classes=2, protos_per_class=2, proto_shape="2x2", image_size=8,
        backbone_channels=(4, 3), backbone_strides=(1, 2), backbone_kernel=3,
        offset_hidden=4, seed=seed,
    )


def tiny_model(config, rng):
    """float64 model with a non-zero offset branch.

    The final branch bias is 0.5 so that sample positions sit mid-cell,
    away from the integer kinks of the interpolation.
    """
    m = M.init_model(config, seed=config.seed, dtype=np.float64)
    last = m.branch[1]
    last.weight = rng.normal(0, 0.05, last.weight.shape)
    last.bias = np.full(last.bias.shape, 0.5)
    m.last_layer = m.last_layer + rng.normal(0, 0.1, m.last_layer.shape)
    return m


# ---------------------------------------------------------------------------
# discrete state of a forward pass


def _signature(model, images, labels, weights):
    cache = M.forward(model, images)
    lc = cache.layer
    pc = model.proto_class
    sig = [pre > 0 for pre in cache.pre]
    sig.append(lc.centers)
    _, m_centers, slope = losses.subtractive_margin_logits(
        lc.maps, labels, pc, weights.margin_phi, lc.mask)
    sig += [m_centers, slope > 0]
    own = losses.class_mask(labels, pc)
    sig.append(np.argmax(np.where(own, lc.scores, -np.inf), axis=1))
    sig.append(np.argmax(np.where(own, -np.inf, lc.scores), axis=1))
    if lc.branch_cache is not None:
        co = lc.sample_cache.coeffs
        sig += [lc.branch_cache.hidden_pre > 0, co.i0, co.j0, co.alpha > 0, co.beta > 0]
    return sig


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _check(name, analytic, f, x, signature=None, h=STEP):
    """Compare ``analytic`` with central differences of ``f`` at array ``x``
    (modified in place and restored)."""
    flat = x.reshape(-1)
    a_flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    base = signature() if signature is not None else None
    checked = skipped = 0
    worst_rel = worst_abs = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        sp = signature() if signature is not None else None
        flat[i] = orig - h
        fm = f()
        sm = signature() if signature is not None else None
        flat[i] = orig
        if signature is not None and not (_same(base, sp) and _same(base, sm)):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        checked += 1
        worst_rel = max(worst_rel, float(relative_error(a_flat[i], num)))
        worst_abs = max(worst_abs, abs(a_flat[i] - num))
    return GroupResult(name, checked, skipped, worst_rel, worst_abs)


# ---------------------------------------------------------------------------
# groups


def _model_groups(model, images, labels, weights):
    obj = M.stage1_loss(model, images, labels, weights, need_backbone=True)
    g = obj.grads

    def f():
        return M.stage1_loss(model, images, labels, weights, with_grad=False).total

    def sig():
        return _signature(model, images, labels, weights)

    results = []
    acc = None
    for layer, (gw, gb) in zip(model.backbone, g.backbone):
        for param, grad in ((layer.weight, gw), (layer.bias, gb)):
            r = _check("backbone", grad, f, param, sig)
            acc = r if acc is None else _merge(acc, r)
    results.append(acc)
    results.append(_check("parts", g.parts, f, model.parts, sig))
    acc = None
    for layer, (gw, gb) in zip(model.branch, g.branch):
        for param, grad in ((layer.weight, gw), (layer.bias, gb)):
            r = _check("offset_branch", grad, f, param, sig)
            acc = r if acc is None else _merge(acc, r)
    results.append(acc)
    return results


def _merge(a, b):
    return GroupResult(a.name, a.checked + b.checked, a.skipped + b.skipped,
                       max(a.max_rel_err, b.max_rel_err), max(a.max_abs_err, b.max_abs_err))


def _normalization_group(rng, r):
    z = rng.normal(size=(2, 4, 3, 3))
    up = rng.normal(size=z.shape)
    analytic = hs.normalize_backward(z, r, up)

    def f():
        return float(np.sum(up * hs.normalize_locations(z, r).tensor))

    return _check("normalization", analytic, f, z)


def _interpolation_groups(rng):
    """Features and both position coordinates of the sampler, including
    positions whose far corners fall off the grid."""
    b, c, h, w, k = 2, 3, 4, 4, 3
    zhat = rng.uniform(0.2, 1.0, size=(b, c, h, w))
    frac = lambda shape: rng.uniform(0.15, 0.85, size=shape)
    x = rng.integers(-1, h, size=(b, k, 2, 2)) + frac((b, k, 2, 2))
    y = rng.integers(-1, w, size=(b, k, 2, 2)) + frac((b, k, 2, 2))
    up = rng.normal(size=(b, k, c, 2, 2))
    _, cache = hs.sample(zhat, x, y)
    gz, gx, gy = hs.sample_backward(cache, up)

    def f():
        return float(np.sum(up * hs.sample(zhat, x, y)[0]))

    def sig():
        co = hs.interp_coeffs(x, y, h, w)
        return [co.i0, co.j0, co.alpha > 0, co.beta > 0]

    return [
        _check("interp_features", gz, f, zhat, sig),
        _check("interp_delta1", gx, f, x, sig),
        _check("interp_delta2", gy, f, y, sig),
    ]


def _last_layer_group(model, images, labels, weights):
    scores = M.forward(model, images).scores
    w = model.last_layer
    _, analytic = losses.last_layer_loss(scores, w, labels, model.proto_class,
                                         weights.lambda_l1_last, grad=True)

    def f():
        return losses.last_layer_loss(scores, w, labels, model.proto_class,
                                      weights.lambda_l1_last)

    def sig():
        return [np.sign(w)]

    return _check("last_layer", analytic, f, w, sig)


def run_gradcheck(seed=0, config=None):
    """All groups on a tiny instance; returns a list of :class:`GroupResult`
    in :data:`GROUPS` order."""
    rng = np.random.default_rng(seed)
    config = config or tiny_config(seed)
    model = tiny_model(config, rng)
    weights = config.loss_weights()
    n = 3
    images = rng.normal(size=(n, 3, config.image_size, config.image_size))
    labels = np.arange(n) % config.num_classes
    backbone, parts, branch = _model_groups(model, images, labels, weights)
    by_name = {r.name: r for r in (
        backbone, parts, branch,
        _normalization_group(rng, model.radius),
        *_interpolation_groups(rng),
        _last_layer_group(model, images, labels, weights),
    )}
    return [by_name[g] for g in GROUPS]


def format_table(results):
    lines = [f"{'group':<16} {'checked':>7} {'skipped':>7} {'max_rel_err':>12} {'status':>6}"]
    for r in results:
        lines.append(f"{r.name:<16} {r.checked:>7d} {r.skipped:>7d} {r.max_rel_err:>12.3e} "
                     f"{'PASS' if r.passed else 'FAIL':>6}")
    return "\n".join(lines)
