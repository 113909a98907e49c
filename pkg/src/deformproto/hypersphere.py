"""Keeping features on the radius-r sphere.

Feature columns get a constant epsilon channel appended (so an all-zero ReLU
output still has a direction), are rescaled to length ``r = 1/sqrt(rho)``, and
are read at fractional positions with a square/blend/sqrt interpolation that
keeps the column length at ``r`` whenever all four neighbours are on the grid.

The interpolation is written in the tent-weight form

    zeta(x, y) = sum_ij zhat_ij**2 * max(0, 1-|x-i|) * max(0, 1-|y-j|)

so neighbours that fall outside the grid simply contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import check_tensor4

DEFAULT_EPSILON = 1e-5


def radius_for(rho):
    return 1.0 / np.sqrt(rho)


@dataclass
class UnitFeatureMap:
    tensor: np.ndarray
    radius: float
    rho: int

    def column_norms(self):
        return np.sqrt(np.sum(self.tensor.astype(np.float64) ** 2, axis=1))


@dataclass
class InterpCoeffs:
    """Corner indices and blend weights for a batch of fractional positions.

    ``i0``/``j0`` are the floor corners, ``i0 + 1``/``j0 + 1`` the upper ones.
    ``valid`` has a trailing axis of four in the order (i0,j0), (i0,j1),
    (i1,j0), (i1,j1) and marks corners inside the grid.
    """

    i0: np.ndarray
    j0: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    valid: np.ndarray


def augment_epsilon(z, epsilon=DEFAULT_EPSILON):
    z = check_tensor4(z, "features")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n, _, h, w = z.shape
    eps = np.full((n, 1, h, w), epsilon, dtype=z.dtype)
    return np.concatenate([z, eps], axis=1)


def normalize_locations(z_aug, r, rho=None):
    """Rescale every channel column to length ``r``."""
    z_aug = check_tensor4(z_aug, "augmented features")
    norms = np.sqrt(np.sum(z_aug * z_aug, axis=1, keepdims=True))
    if np.any(norms <= 0):
        raise ValueError("zero-norm feature column; append the epsilon channel first")
    if rho is None:
        rho = int(round(1.0 / (r * r)))
    return UnitFeatureMap((r * z_aug / norms).astype(z_aug.dtype, copy=False), float(r), rho)


def normalize_backward(z_aug, r, upstream):
    """Apply (r/|x|)(I - x x^T/|x|^2) column-wise to ``upstream``."""
    norms = np.sqrt(np.sum(z_aug * z_aug, axis=1, keepdims=True))
    if np.any(norms <= 0):
        raise ValueError("zero-norm feature column")
    radial = np.sum(z_aug * upstream, axis=1, keepdims=True) / (norms * norms)
    return (r / norms) * (upstream - radial * z_aug)


def interp_coeffs(x, y, height, width):
    x = np.asarray(x)
    y = np.asarray(y)
    fi = np.floor(x)
    fj = np.floor(y)
    alpha = x - fi
    beta = y - fj
    i0 = fi.astype(np.int64)
    j0 = fj.astype(np.int64)
    in_i0 = (i0 >= 0) & (i0 < height)
    in_i1 = (i0 + 1 >= 0) & (i0 + 1 < height)
    in_j0 = (j0 >= 0) & (j0 < width)
    in_j1 = (j0 + 1 >= 0) & (j0 + 1 < width)
    valid = np.stack([in_i0 & in_j0, in_i0 & in_j1, in_i1 & in_j0, in_i1 & in_j1], axis=-1)
    return InterpCoeffs(i0, j0, alpha, beta, valid)


@dataclass
class SampleCache:
    zhat: np.ndarray
    coeffs: InterpCoeffs
    corners: list  # four arrays shaped like the output, zero where off-grid
    out: np.ndarray


def sample(zhat, x, y):
    """Norm-preserving interpolation of ``zhat`` (B, C, H, W) at positions.

    ``x`` and ``y`` have shape (B, K, Ha, Wa) and hold fractional row/column
    positions; the result has shape (B, K, C, Ha, Wa).
    """
    zhat = check_tensor4(zhat, "zhat")
    b, c, h, w = zhat.shape
    co = interp_coeffs(x, y, h, w)
    dtype = zhat.dtype
    alpha = co.alpha.astype(dtype)
    beta = co.beta.astype(dtype)
    bidx = np.arange(b).reshape((b,) + (1,) * (x.ndim - 1))
    weights = [(1 - alpha) * (1 - beta), (1 - alpha) * beta, alpha * (1 - beta), alpha * beta]
    offsets = [(0, 0), (0, 1), (1, 0), (1, 1)]
    zeta = np.zeros(x.shape[:2] + (c,) + x.shape[2:], dtype=dtype)
    corners = []
    for q, (di, dj) in enumerate(offsets):
        ii = np.clip(co.i0 + di, 0, h - 1)
        jj = np.clip(co.j0 + dj, 0, w - 1)
        # advanced indexing puts the channel axis last: (B, K, Ha, Wa, C)
        vals = zhat[bidx, :, ii, jj]
        vals = np.moveaxis(vals, -1, 2) * co.valid[..., q][:, :, None]
        corners.append(vals)
        zeta += weights[q][:, :, None] * vals * vals
    out = np.sqrt(zeta)
    return out, SampleCache(zhat, co, corners, out)


def sample_backward(cache, grad_out):
    """Back-propagate through :func:`sample`.

    Returns ``(grad_zhat, grad_x, grad_y)``. The position derivative follows
    the three-case tent slope: -1 on ``0 <= x - i < 1``, +1 on
    ``-1 < x - i < 0`` and 0 elsewhere, so at an integer position only the
    floor corner contributes.
    """
    co = cache.coeffs
    zhat = cache.zhat
    b, c, h, w = zhat.shape
    dtype = np.result_type(zhat, grad_out)
    out = cache.out
    safe = np.where(out > 0, out, 1)
    # d sqrt(zeta) / d zeta, defined as 0 where zeta == 0
    g_zeta = np.where(out > 0, grad_out / (2 * safe), 0).astype(dtype, copy=False)

    alpha = co.alpha.astype(dtype)[:, :, None]
    beta = co.beta.astype(dtype)[:, :, None]
    v00, v01, v10, v11 = (q * q for q in cache.corners)
    a_pos = (alpha > 0).astype(dtype)
    b_pos = (beta > 0).astype(dtype)
    dzeta_dx = (1 - beta) * (-v00 + a_pos * v10) + beta * (-v01 + a_pos * v11)
    dzeta_dy = (1 - alpha) * (-v00 + b_pos * v01) + alpha * (-v10 + b_pos * v11)
    grad_x = np.sum(g_zeta * dzeta_dx, axis=2)
    grad_y = np.sum(g_zeta * dzeta_dy, axis=2)

    weights = [(1 - alpha) * (1 - beta), (1 - alpha) * beta, alpha * (1 - beta), alpha * beta]
    offsets = [(0, 0), (0, 1), (1, 0), (1, 1)]
    grad_zhat = np.zeros((b, h, w, c), dtype=dtype)
    bidx = np.broadcast_to(np.arange(b).reshape((b,) + (1,) * (co.i0.ndim - 1)), co.i0.shape)
    for q, (di, dj) in enumerate(offsets):
        contrib = g_zeta * 2 * cache.corners[q] * weights[q]
        mask = co.valid[..., q]
        if not mask.any():
            continue
        ii = (co.i0 + di)[mask]
        jj = (co.j0 + dj)[mask]
        vals = np.moveaxis(contrib, 2, -1)[mask]
        np.add.at(grad_zhat, (bidx[mask], ii, jj), vals)
    return np.ascontiguousarray(grad_zhat.transpose(0, 3, 1, 2)), grad_x, grad_y


def _as_grid(zhat):
    arr = zhat.tensor if isinstance(zhat, UnitFeatureMap) else np.asarray(zhat)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("single-point interpolation needs one image")
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError("expected a (C, H, W) feature grid")
    return arr


def norm_preserving_interpolate(zhat, x, y):
    """Feature vector at fractional (row ``x``, column ``y``) of one grid."""
    grid = _as_grid(zhat)
    pos = np.array([[[[x]]]], dtype=np.float64)
    out, _ = sample(grid[None], pos, np.array([[[[y]]]], dtype=np.float64))
    return out[0, 0, :, 0, 0]


def interpolate_backward(zhat, x, y, upstream):
    """Gradients of ``upstream . norm_preserving_interpolate(zhat, x, y)``.

    Returns ``(grad_grid, grad_x, grad_y)`` with ``grad_grid`` shaped like the
    (C, H, W) grid.
    """
    grid = _as_grid(zhat)
    pos_x = np.array([[[[x]]]], dtype=np.float64)
    pos_y = np.array([[[[y]]]], dtype=np.float64)
    _, cache = sample(grid[None], pos_x, pos_y)
    up = np.asarray(upstream, dtype=grid.dtype).reshape(1, 1, -1, 1, 1)
    g, gx, gy = sample_backward(cache, up)
    return g[0], float(gx[0, 0, 0, 0]), float(gy[0, 0, 0, 0])


def bilinear_interpolate(grid, x, y):
    """Plain bilinear blend, kept only to contrast with the norm-preserving one."""
    grid = _as_grid(grid)
    _, h, w = grid.shape
    co = interp_coeffs(np.array(x), np.array(y), h, w)
    a, b = float(co.alpha), float(co.beta)
    i0, j0 = int(co.i0), int(co.j0)
    out = np.zeros(grid.shape[0], dtype=np.float64)
    for (di, dj), wt, ok in zip(
        [(0, 0), (0, 1), (1, 0), (1, 1)],
        [(1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b],
        co.valid,
    ):
        if ok:
            out += wt * grid[:, i0 + di, j0 + dj]
    return out
