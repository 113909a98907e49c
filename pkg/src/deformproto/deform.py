"""The deformable prototype layer.

A prototype is a ``rows x cols`` grid of parts, each a vector of length ``r``
in the (epsilon-augmented) feature space. At every center ``(a, b)`` of the
latent grid, part ``k`` with regular displacement ``(m_k, n_k)`` is compared
with the interpolated feature at ``(a + m_k + d1, b + n_k + d2)``, where the
offsets ``(d1, d2)`` come from a small conv branch applied to the normalized
features. Offsets are shared by every prototype: they depend on the image, the
center and the part index only.

Arrays used throughout:

* ``zhat``    (B, C, H, W)        normalized features, C = d + 1
* ``parts``   (P, rho, C)         all prototypes stacked, row-major part order
* ``offsets`` (B, 2*rho, H, W)    channel 2k is the row offset of part k,
                                  channel 2k+1 the column offset
* ``samples`` (B, rho, C, H, W)   interpolated features per part and center
* ``maps``    (B, P, H, W)        similarity of every prototype at every center
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hypersphere as hs
from .tensor import ConvLayer, conv2d_backward, conv2d_forward, relu, relu_backward


@dataclass(frozen=True)
class PartGrid:
    """Geometry shared by all prototypes of a model.

    Displacements are spaced ``dilation`` apart and centred on zero, which
    gives {-1, 0, 1} for a 3x3 grid and {-1, 1} for a 2x2 grid with dilation 2.
    """

    rows: int
    cols: int
    dilation: int = 1

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.dilation < 1:
            raise ValueError(f"bad part grid {self.rows}x{self.cols}, dilation {self.dilation}")
        if (self.dilation * (self.rows - 1)) % 2 or (self.dilation * (self.cols - 1)) % 2:
            raise ValueError("an even side needs an even dilation to keep parts on the grid")

    @classmethod
    def from_shape(cls, shape):
        """'3x3' -> dilation 1, '2x2' -> dilation 2; any even side forces dilation 2."""
        rows, cols = (int(v) for v in shape.lower().split("x"))
        dilation = 2 if rows % 2 == 0 or cols % 2 == 0 else 1
        return cls(rows, cols, dilation)

    @property
    def rho(self):
        return self.rows * self.cols

    @property
    def radius(self):
        return float(hs.radius_for(self.rho))

    def displacements(self):
        """(rho, 2) array of (m, n) per part, row-major."""
        m = self.dilation * (np.arange(self.rows) - (self.rows - 1) / 2)
        n = self.dilation * (np.arange(self.cols) - (self.cols - 1) / 2)
        mm, nn = np.meshgrid(m, n, indexing="ij")
        return np.stack([mm.ravel(), nn.ravel()], axis=1)

    def part_indices(self):
        return [(i, j) for i in range(self.rows) for j in range(self.cols)]

    def interior_mask(self, height, width):
        """Centers whose undeformed parts all land on the grid."""
        disp = self.displacements()
        lo_m, hi_m = disp[:, 0].min(), disp[:, 0].max()
        lo_n, hi_n = disp[:, 1].min(), disp[:, 1].max()
        a = np.arange(height)[:, None]
        b = np.arange(width)[None, :]
        return (a + lo_m >= 0) & (a + hi_m <= height - 1) & (b + lo_n >= 0) & (b + hi_n <= width - 1)


@dataclass
class DeformablePrototype:
    class_id: int
    index: int
    parts: np.ndarray  # (rows, cols, C)
    grid: PartGrid

    @property
    def radius(self):
        return self.grid.radius

    def stacked(self):
        return self.parts.reshape(self.grid.rho, -1)

    def check(self, tol=1e-5):
        norms = np.linalg.norm(self.stacked().astype(np.float64), axis=1)
        if np.max(np.abs(norms - self.radius)) > tol:
            raise ValueError(f"part norms {norms} differ from r = {self.radius}")


def renormalize_parts(parts, r):
    norms = np.linalg.norm(parts, axis=-1, keepdims=True)
    return (r * parts / np.where(norms > 0, norms, 1)).astype(parts.dtype, copy=False)


# ---------------------------------------------------------------------------
# offset branch


@dataclass
class BranchCache:
    zhat: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray


def _branch_forward(zhat, branch):
    first, second = branch
    pre = conv2d_forward(zhat, first)
    hidden = relu(pre)
    return conv2d_forward(hidden, second), BranchCache(zhat, pre, hidden)


def predict_offsets(zhat, branch, rho=None):
    """Two 3x3 same-padded convs (ReLU between) mapping zhat to 2*rho offsets."""
    if len(branch) != 2:
        raise ValueError("the offset branch has exactly two conv layers")
    if rho is not None and branch[1].out_channels != 2 * rho:
        raise ValueError(
            f"offset branch emits {branch[1].out_channels} channels, need {2 * rho}"
        )
    zt = zhat.tensor if isinstance(zhat, hs.UnitFeatureMap) else zhat
    offsets, _ = _branch_forward(zt, branch)
    return offsets


def offsets_backward(cache, branch, grad_offsets):
    """Returns ``(grad_zhat, [(gW1, gb1), (gW2, gb2)])``."""
    first, second = branch
    g_hidden, gw2, gb2 = conv2d_backward(cache.hidden, second, grad_offsets)
    g_pre = relu_backward(cache.hidden_pre, g_hidden)
    g_zhat, gw1, gb1 = conv2d_backward(cache.zhat, first, g_pre)
    return g_zhat, [(gw1, gb1), (gw2, gb2)]


def init_branch(in_channels, hidden, rho, rng, dtype=np.float32):
    """First conv He-scaled random, final conv zero so offsets start at zero."""
    std = np.sqrt(2.0 / (in_channels * 9))
    w1 = (rng.standard_normal((hidden, in_channels, 3, 3)) * std).astype(dtype)
    first = ConvLayer.same(w1, np.zeros(hidden, dtype=dtype))
    second = ConvLayer.same(
        np.zeros((2 * rho, hidden, 3, 3), dtype=dtype), np.zeros(2 * rho, dtype=dtype)
    )
    return [first, second]


# ---------------------------------------------------------------------------
# sampling and similarity


def sample_positions(offsets, grid):
    """Absolute fractional positions (B, rho, H, W) for rows and columns."""
    b, ch, h, w = offsets.shape
    if ch != 2 * grid.rho:
        raise ValueError(f"offset field has {ch} channels, need {2 * grid.rho}")
    disp = grid.displacements()
    a = np.arange(h, dtype=np.float64).reshape(1, 1, h, 1)
    c = np.arange(w, dtype=np.float64).reshape(1, 1, 1, w)
    x = a + disp[:, 0].reshape(1, -1, 1, 1) + offsets[:, 0::2].astype(np.float64)
    y = c + disp[:, 1].reshape(1, -1, 1, 1) + offsets[:, 1::2].astype(np.float64)
    return x, y


def sample_deformed(zhat, offsets, grid):
    """Interpolated features for every part at every center: (B, rho, C, H, W)."""
    x, y = sample_positions(offsets, grid)
    return hs.sample(zhat, x, y)


def sample_rigid(zhat, grid):
    """Undeformed gather with zero padding; same layout as :func:`sample_deformed`."""
    b, c, h, w = zhat.shape
    disp = grid.displacements().astype(int)
    pad = int(np.abs(disp).max())
    zp = np.pad(zhat, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((b, grid.rho, c, h, w), dtype=zhat.dtype)
    for k, (m, n) in enumerate(disp):
        out[:, k] = zp[:, :, pad + m : pad + m + h, pad + n : pad + n + w]
    return out


def sample_rigid_backward(grad_samples, grid, shape):
    b, c, h, w = shape
    disp = grid.displacements().astype(int)
    pad = int(np.abs(disp).max())
    gp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=grad_samples.dtype)
    for k, (m, n) in enumerate(disp):
        gp[:, :, pad + m : pad + m + h, pad + n : pad + n + w] += grad_samples[:, k]
    return gp[:, :, pad : pad + h, pad : pad + w]


def _parts_array(proto, grid):
    if isinstance(proto, DeformablePrototype):
        return proto.stacked()[None]
    parts = np.asarray(proto)
    if parts.ndim == 2:
        parts = parts[None]
    if parts.shape[1] != grid.rho:
        raise ValueError(f"prototype has {parts.shape[1]} parts, grid has {grid.rho}")
    return parts


def similarity_from_samples(parts, samples):
    if parts.shape[2] != samples.shape[2]:
        raise ValueError(
            f"part dimension {parts.shape[2]} != feature channels {samples.shape[2]}"
        )
    return np.einsum("pkc,bkcij->bpij", parts, samples, optimize=True)


def part_contributions(parts, samples):
    """Per-part dot products (B, P, rho, H, W); they sum to the similarity map."""
    return np.einsum("pkc,bkcij->bpkij", parts, samples, optimize=True)


def similarity_map(zhat, proto, offsets, grid):
    """Deformed similarity of each prototype at every center, (B, P, H, W)."""
    zt = zhat.tensor if isinstance(zhat, hs.UnitFeatureMap) else zhat
    parts = _parts_array(proto, grid)
    samples, _ = sample_deformed(zt, offsets, grid)
    return similarity_from_samples(parts, samples)


def similarity_nondeformable(zhat, proto, grid):
    """Rigid (zero-offset) similarity as a sum of shifted channel dot products."""
    zt = zhat.tensor if isinstance(zhat, hs.UnitFeatureMap) else zhat
    parts = _parts_array(proto, grid)
    b, c, h, w = zt.shape
    if parts.shape[2] != c:
        raise ValueError(f"part dimension {parts.shape[2]} != feature channels {c}")
    disp = grid.displacements().astype(int)
    pad = int(np.abs(disp).max())
    zp = np.pad(zt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((b, parts.shape[0], h, w), dtype=np.result_type(zt, parts))
    for k, (m, n) in enumerate(disp):
        window = zp[:, :, pad + m : pad + m + h, pad + n : pad + n + w]
        out += np.einsum("pc,bcij->bpij", parts[:, k], window)
    return out


def max_pool_similarity(sim, mask=None):
    """Global max and its first row-major center.

    ``sim`` may be a single (H, W) map, returning ``(score, (a, b))``, or a
    stack (..., H, W), returning arrays of scores and flat center indices.
    ``mask`` (H, W) restricts the candidate centers.
    """
    sim = np.asarray(sim)
    if sim.size == 0:
        raise ValueError("empty similarity map")
    h, w = sim.shape[-2:]
    work = sim if mask is None else np.where(mask, sim, -np.inf)
    flat = work.reshape(sim.shape[:-2] + (h * w,))
    idx = np.argmax(flat, axis=-1)
    score = np.take_along_axis(sim.reshape(flat.shape), idx[..., None], axis=-1)[..., 0]
    if sim.ndim == 2:
        return float(score), divmod(int(idx), w)
    return score, idx


# ---------------------------------------------------------------------------
# full layer


@dataclass
class LayerCache:
    zhat: np.ndarray
    parts: np.ndarray
    grid: PartGrid
    samples: np.ndarray
    maps: np.ndarray
    scores: np.ndarray
    centers: np.ndarray  # flat row-major argmax per (image, prototype)
    mask: np.ndarray | None = None
    offsets: np.ndarray | None = None
    sample_cache: hs.SampleCache | None = None
    branch: list | None = None
    branch_cache: BranchCache | None = None

    @property
    def deformable(self):
        return self.branch is not None


@dataclass
class LayerGrads:
    zhat: np.ndarray
    parts: np.ndarray
    branch: list = field(default_factory=list)
    offsets: np.ndarray | None = None


def layer_forward(zhat, parts, grid, branch=None, interior_only=False):
    """Scores (B, P) via offsets -> similarity maps -> global max pooling.

    With ``branch=None`` the layer runs rigidly (no offsets at all).
    """
    zt = zhat.tensor if isinstance(zhat, hs.UnitFeatureMap) else zhat
    parts = _parts_array(parts, grid)
    if parts.shape[2] != zt.shape[1]:
        raise ValueError(
            f"part dimension {parts.shape[2]} != feature channels {zt.shape[1]}"
        )
    h, w = zt.shape[2:]
    mask = grid.interior_mask(h, w) if interior_only else None
    if mask is not None and not mask.any():
        raise ValueError("interior_only leaves no admissible centers")
    cache = LayerCache(zt, parts, grid, None, None, None, None, mask=mask)
    if branch is None:
        cache.samples = sample_rigid(zt, grid)
    else:
        offsets, bcache = _branch_forward(zt, branch)
        if offsets.shape[1] != 2 * grid.rho:
            raise ValueError("offset branch output does not match the part grid")
        samples, scache = sample_deformed(zt, offsets, grid)
        cache.samples = samples
        cache.offsets = offsets
        cache.sample_cache = scache
        cache.branch = branch
        cache.branch_cache = bcache
    cache.maps = similarity_from_samples(parts, cache.samples)
    cache.scores, cache.centers = max_pool_similarity(cache.maps, mask)
    return cache.scores, cache


def similarity_backward(cache, grad_maps):
    """Gradients of ``sum(grad_maps * maps)`` w.r.t. zhat, parts and branch.

    The zhat gradient sums the direct corner path with the two offset paths,
    the latter routed back through the offset branch.
    """
    grad_parts = np.einsum("bpij,bkcij->pkc", grad_maps, cache.samples, optimize=True)
    grad_samples = np.einsum("bpij,pkc->bkcij", grad_maps, cache.parts, optimize=True)
    if not cache.deformable:
        grad_zhat = sample_rigid_backward(grad_samples, cache.grid, cache.zhat.shape)
        return LayerGrads(grad_zhat, grad_parts)
    grad_zhat, gx, gy = hs.sample_backward(cache.sample_cache, grad_samples)
    b, rho, h, w = gx.shape
    grad_offsets = np.empty((b, 2 * rho, h, w), dtype=grad_zhat.dtype)
    grad_offsets[:, 0::2] = gx
    grad_offsets[:, 1::2] = gy
    g_branch_in, branch_grads = offsets_backward(cache.branch_cache, cache.branch, grad_offsets)
    return LayerGrads(grad_zhat + g_branch_in, grad_parts, branch_grads, grad_offsets)


def scatter_to_centers(upstream, centers, map_shape):
    """Place per-(image, prototype) values at flat center indices of zero maps."""
    b, p, h, w = map_shape
    grad = np.zeros((b, p, h * w), dtype=np.asarray(upstream).dtype)
    np.put_along_axis(grad, centers[..., None], np.asarray(upstream)[..., None], axis=-1)
    return grad.reshape(map_shape)


def layer_backward(cache, upstream_scores):
    """Max-pool subgradient: only each prototype's argmax center receives gradient."""
    upstream_scores = np.asarray(upstream_scores, dtype=cache.maps.dtype)
    grad_maps = scatter_to_centers(upstream_scores, cache.centers, cache.maps.shape)
    return similarity_backward(cache, grad_maps)
