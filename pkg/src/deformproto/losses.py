"""Training objectives with analytic gradients.

Scores are (N, P) pooled cosines, ``proto_class`` is the (P,) class id of each
prototype and the last layer is a (P, K) matrix. Functions return the scalar
loss, or ``(loss, grad)`` when called with ``grad=True``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THETA_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_sep: float = 0.01
    lambda_clst: float = 0.1
    lambda_ortho: float = 0.1
    margin_phi: float = 0.1
    lambda_l1_last: float = 1e-3

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


def class_mask(labels, proto_class):
    """(N, P) boolean: prototype belongs to the image's class."""
    return np.asarray(proto_class)[None, :] == np.asarray(labels)[:, None]


def _check_classes(labels, proto_class):
    missing = set(np.unique(labels).tolist()) - set(np.unique(proto_class).tolist())
    if missing:
        raise ValueError(f"classes without prototypes: {sorted(missing)}")


def _masked_max_mean(scores, mask, sign, grad):
    n = scores.shape[0]
    work = np.where(mask, scores, -np.inf)
    idx = np.argmax(work, axis=1)
    best = scores[np.arange(n), idx]
    loss = sign * float(np.mean(best.astype(np.float64)))
    if not grad:
        return loss
    g = np.zeros_like(scores)
    g[np.arange(n), idx] = sign / n
    return loss, g


def cluster_loss(scores, labels, proto_class, grad=False):
    """Negative mean of each image's best same-class prototype score."""
    scores = np.asarray(scores)
    _check_classes(labels, proto_class)
    return _masked_max_mean(scores, class_mask(labels, proto_class), -1.0, grad)


def separation_loss(scores, labels, proto_class, grad=False):
    """Mean of each image's best other-class prototype score."""
    scores = np.asarray(scores)
    _check_classes(labels, proto_class)
    other = ~class_mask(labels, proto_class)
    if not other.any(axis=1).all():
        raise ValueError("separation needs prototypes of at least one other class")
    return _masked_max_mean(scores, other, 1.0, grad)


def margin_adjust(cosines, phi):
    """cos(max(0, arccos(c) - phi)) with the cosine clamped away from +-1.

    Returns ``(adjusted, slope)`` where ``slope`` is d adjusted / d cosine.
    """
    c = np.asarray(cosines, dtype=np.float64)
    if phi == 0:
        return c.copy(), np.ones_like(c)
    lim = 1 - THETA_CLAMP
    cc = np.clip(c, -lim, lim)
    theta = np.arccos(cc)
    shifted = theta - phi
    active = shifted > 0
    adjusted = np.cos(np.where(active, shifted, 0.0))
    inside = (c > -lim) & (c < lim)
    slope = np.where(active & inside, np.sin(np.where(active, shifted, 0)) / np.sin(theta), 0.0)
    return adjusted, slope


def subtractive_margin_logits(maps, labels, proto_class, phi, mask=None):
    """Margin-adjusted pooled scores for a batch of similarity maps.

    ``maps`` is (N, P, H, W). Target-class prototypes keep the plain max over
    centers; every other prototype takes the max over centers of the
    angle-reduced cosine. Returns ``(adjusted, centers, slope)``: adjusted
    scores (N, P), the flat center each came from, and the derivative of the
    adjusted score w.r.t. the map value at that center.
    """
    maps = np.asarray(maps)
    n, p, h, w = maps.shape
    target = class_mask(labels, proto_class)[:, :, None, None]
    adj, slope = margin_adjust(maps, phi)
    adj = np.where(target, maps.astype(np.float64), adj)
    slope = np.where(target, 1.0, slope)
    work = adj if mask is None else np.where(mask, adj, -np.inf)
    flat = work.reshape(n, p, h * w)
    centers = np.argmax(flat, axis=-1)
    pick = lambda a: np.take_along_axis(a.reshape(n, p, h * w), centers[..., None], -1)[..., 0]
    return pick(adj).astype(maps.dtype), centers, pick(slope).astype(maps.dtype)


def _log_softmax(logits):
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.sum(np.exp(shift), axis=1, keepdims=True))


def margin_cross_entropy(adjusted, last_layer, labels, grad=False):
    """Mean softmax cross entropy of class logits ``adjusted @ last_layer``.

    With ``grad=True`` returns ``(loss, grad_scores, grad_last_layer)``.
    """
    adjusted = np.asarray(adjusted)
    labels = np.asarray(labels)
    n = adjusted.shape[0]
    logits = adjusted.astype(np.float64) @ np.asarray(last_layer, dtype=np.float64)
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    if not grad:
        return loss
    g_logits = np.exp(logp)
    g_logits[np.arange(n), labels] -= 1
    g_logits /= n
    g_scores = (g_logits @ np.asarray(last_layer, dtype=np.float64).T).astype(adjusted.dtype)
    g_w = (adjusted.astype(np.float64).T @ g_logits).astype(np.asarray(last_layer).dtype)
    return loss, g_scores, g_w


def orthogonality_loss(parts, proto_class, r, grad=False):
    """Sum over classes of ||P P^T - r^2 I||_F^2, P = all parts of the class as rows."""
    parts = np.asarray(parts)
    proto_class = np.asarray(proto_class)
    total = 0.0
    g = np.zeros_like(parts) if grad else None
    for c in np.unique(proto_class):
        sel = proto_class == c
        block = parts[sel].astype(np.float64)
        rows = block.reshape(-1, block.shape[-1])
        resid = rows @ rows.T - (r * r) * np.eye(rows.shape[0])
        total += float(np.sum(resid * resid))
        if grad:
            g[sel] = (4 * resid @ rows).reshape(block.shape).astype(parts.dtype)
    return (total, g) if grad else total


def off_class_mask(proto_class, num_classes):
    """(P, K) True where the connection goes to a class other than the prototype's."""
    return np.asarray(proto_class)[:, None] != np.arange(num_classes)[None, :]


def init_last_layer(proto_class, num_classes, dtype=np.float32):
    """1 for own-class connections, -0.5 for the rest."""
    return np.where(off_class_mask(proto_class, num_classes), -0.5, 1.0).astype(dtype)


def last_layer_loss(scores, last_layer, labels, proto_class, lambda_l1, grad=False):
    """Plain cross entropy plus an L1 penalty on off-class connections.

    The L1 subgradient is taken as 0 at exactly 0. With ``grad=True`` returns
    ``(loss, grad_last_layer)``.
    """
    w = np.asarray(last_layer)
    off = off_class_mask(proto_class, w.shape[1])
    l1 = float(np.sum(np.abs(w[off]).astype(np.float64)))
    if not grad:
        return margin_cross_entropy(scores, w, labels) + lambda_l1 * l1
    ce, _, g_w = margin_cross_entropy(scores, w, labels, grad=True)
    g_w = g_w + lambda_l1 * np.where(off, np.sign(w), 0).astype(w.dtype)
    return ce + lambda_l1 * l1, g_w
