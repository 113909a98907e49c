import numpy as np
import pytest
from hypothesis import given, strategies as st

from deformproto import deform as D
from deformproto import hypersphere as hs
from deformproto.tensor import ConvLayer, finite_difference_gradient


def unit_features(rng, b, c, h, w, rho):
    z = np.maximum(rng.normal(size=(b, c - 1, h, w)), 0)
    return hs.normalize_locations(hs.augment_epsilon(z), hs.radius_for(rho)).tensor


def random_parts(rng, p, grid, c):
    return D.renormalize_parts(rng.normal(size=(p, grid.rho, c)), grid.radius)


def naive_rigid(zhat, parts, grid):
    """Dot-product loop over every center and part with zero padding."""
    b, c, h, w = zhat.shape
    out = np.zeros((b, len(parts), h, w))
    disp = grid.displacements().astype(int)
    for bi in range(b):
        for p in range(len(parts)):
            for a in range(h):
                for bb in range(w):
                    for k, (m, n) in enumerate(disp):
                        i, j = a + m, bb + n
                        if 0 <= i < h and 0 <= j < w:
                            out[bi, p, a, bb] += parts[p, k] @ zhat[bi, :, i, j]
    return out


def branch_with_bias(rng, c, hidden, rho, bias=0.5, scale=0.05):
    first = ConvLayer.same(rng.normal(0, 0.3, (hidden, c, 3, 3)), rng.normal(0, 0.1, hidden))
    second = ConvLayer.same(rng.normal(0, scale, (2 * rho, hidden, 3, 3)), np.full(2 * rho, bias))
    return [first, second]


# geometry


def test_part_grid_shapes():
    g3 = D.PartGrid.from_shape("3x3")
    assert (g3.rho, g3.dilation) == (9, 1)
    assert sorted(map(tuple, g3.displacements().astype(int))) == [
        (m, n) for m in (-1, 0, 1) for n in (-1, 0, 1)]
    g2 = D.PartGrid.from_shape("2x2")
    assert (g2.rho, g2.dilation, g2.radius) == (4, 2, 0.5)
    assert g2.displacements().astype(int).tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]
    assert g2.part_indices() == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_interior_mask():
    mask = D.PartGrid(3, 3).interior_mask(5, 4)
    assert mask.sum() == 3 * 2
    assert mask[1:4, 1:3].all()


def test_prototype_norms(rng):
    grid = D.PartGrid(3, 3)
    parts = random_parts(rng, 1, grid, 5)[0]
    proto = D.DeformablePrototype(0, 0, parts.reshape(3, 3, 5), grid)
    proto.check()
    assert np.linalg.norm(proto.stacked()) == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ValueError):
        D.DeformablePrototype(0, 0, 2 * parts.reshape(3, 3, 5), grid).check()


# offsets


def test_zero_final_conv_gives_zero_offsets(rng):
    branch = D.init_branch(5, 8, 9, rng)
    zhat = unit_features(rng, 2, 5, 6, 6, 9).astype(np.float32)
    off = D.predict_offsets(zhat, branch, rho=9)
    assert off.shape == (2, 18, 6, 6)
    assert not off.any()


def test_offset_field_shape_for_full_scale_grid(rng):
    branch = D.init_branch(4, 6, 9, rng)
    assert D.predict_offsets(np.ones((1, 4, 14, 14)), branch).shape == (1, 18, 14, 14)
    with pytest.raises(ValueError):
        D.predict_offsets(np.ones((1, 4, 14, 14)), branch, rho=4)


def test_offset_branch_gradient_matches_fd(rng):
    zhat = unit_features(rng, 1, 3, 4, 4, 4)
    branch = branch_with_bias(rng, 3, 4, 4, bias=0.0, scale=0.3)
    up = rng.normal(size=(1, 8, 4, 4))
    _, cache = D._branch_forward(zhat, branch)
    gz, grads = D.offsets_backward(cache, branch, up)
    f = lambda v: np.sum(up * D.predict_offsets(v, branch))
    np.testing.assert_allclose(gz, finite_difference_gradient(f, zhat), rtol=1e-3, atol=1e-5)
    w = branch[0].weight

    def fw(v):
        b2 = [ConvLayer.same(v, branch[0].bias), branch[1]]
        return np.sum(up * D.predict_offsets(zhat, b2))

    np.testing.assert_allclose(grads[0][0], finite_difference_gradient(fw, w), rtol=1e-3,
                               atol=1e-5)


def test_offset_layout_row_then_column(rng):
    grid = D.PartGrid(3, 3)
    off = np.zeros((1, 18, 4, 4))
    off[0, 2 * 4] = 0.25  # part 4 (center), row offset
    off[0, 2 * 4 + 1] = -0.5  # part 4, column offset
    x, y = D.sample_positions(off, grid)
    assert x[0, 4, 2, 3] == 2.25 and y[0, 4, 2, 3] == 2.5
    assert x[0, 0, 2, 3] == 1.0 and y[0, 0, 2, 3] == 2.0


# similarity


def test_patch_copy_scores_one(rng):
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 1, 4, 5, 5, 9)
    a0, b0 = 2, 1
    patch = np.stack([zhat[0, :, a0 + m, b0 + n] for m, n in grid.displacements().astype(int)])
    sim = D.similarity_map(zhat, patch, np.zeros((1, 18, 5, 5)), grid)
    assert sim[0, 0, a0, b0] == pytest.approx(1.0, abs=1e-12)
    score, center = D.max_pool_similarity(sim[0, 0])
    assert score == pytest.approx(1.0) and center == (a0, b0)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["3x3", "2x2", "1x1", "2x3"]))
def test_zero_offsets_equal_rigid(seed, shape):
    r = np.random.default_rng(seed)
    grid = D.PartGrid.from_shape(shape)
    zhat = unit_features(r, 2, 4, 5, 6, grid.rho)
    parts = random_parts(r, 3, grid, 4)
    deformed = D.similarity_map(zhat, parts, np.zeros((2, 2 * grid.rho, 5, 6)), grid)
    rigid = D.similarity_nondeformable(zhat, parts, grid)
    np.testing.assert_allclose(deformed, rigid, atol=1e-6)


def test_rigid_matches_naive_loop(rng):
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 1, 4, 5, 5, 9)
    parts = random_parts(rng, 2, grid, 4)
    np.testing.assert_allclose(D.similarity_nondeformable(zhat, parts, grid),
                               naive_rigid(zhat, parts, grid), atol=1e-12)


def test_one_by_one_prototype_is_plain_cosine(rng):
    grid = D.PartGrid(1, 1)
    z = rng.normal(size=(1, 3, 3, 3))
    zhat = hs.normalize_locations(z, 1.0).tensor
    p = rng.normal(size=3)
    sim = D.similarity_nondeformable(zhat, (p / np.linalg.norm(p)).reshape(1, 1, 3), grid)
    cos = np.einsum("c,cij->ij", p, z[0]) / (np.linalg.norm(p) * np.linalg.norm(z[0], axis=0))
    np.testing.assert_allclose(sim[0, 0], cos, atol=1e-12)


def test_orthogonal_parts_give_zero_map(rng):
    grid = D.PartGrid.from_shape("2x2")
    zhat = np.zeros((1, 4, 4, 4))
    zhat[:, :2] = rng.uniform(0.1, 1, size=(1, 2, 4, 4))
    zhat = hs.normalize_locations(zhat, 0.5).tensor
    parts = np.zeros((1, 4, 4))
    parts[0, :, 2] = 0.5
    off = rng.uniform(-1, 1, size=(1, 8, 4, 4))
    assert not D.similarity_map(zhat, parts, off, grid).any()


@given(st.integers(0, 2**31 - 1))
def test_score_and_part_bounds_under_deformation(seed):
    r = np.random.default_rng(seed)
    grid = D.PartGrid(3, 3)
    zhat = unit_features(r, 2, 5, 5, 5, 9)
    parts = random_parts(r, 3, grid, 5)
    x_off = r.uniform(-2, 2, size=(2, 18, 5, 5))
    samples, _ = D.sample_deformed(zhat, x_off, grid)
    sim = D.similarity_from_samples(parts, samples)
    contrib = D.part_contributions(parts, samples)
    assert np.all(np.abs(sim) <= 1 + 1e-5)
    assert np.all(np.abs(contrib) <= 1 / 9 + 1e-5)
    np.testing.assert_allclose(contrib.sum(axis=2), sim, atol=1e-12)


def test_integer_offsets_shift_the_rigid_window(rng):
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 1, 4, 7, 7, 9)
    parts = random_parts(rng, 1, grid, 4)
    off = np.zeros((1, 18, 7, 7))
    off[:, 0::2] = 1.0
    shifted = D.similarity_map(zhat, parts, off, grid)
    rigid = D.similarity_nondeformable(zhat, parts, grid)
    np.testing.assert_allclose(shifted[0, 0, 1:5, 1:6], rigid[0, 0, 2:6, 1:6], atol=1e-9)


# max pooling


def test_max_pool_examples():
    assert D.max_pool_similarity(np.full((4, 5), 0.3)) == (pytest.approx(0.3), (0, 0))
    m = np.zeros((6, 7))
    m[3, 5] = 1
    assert D.max_pool_similarity(m) == (1.0, (3, 5))
    with pytest.raises(ValueError):
        D.max_pool_similarity(np.zeros((0, 0)))


@given(st.integers(0, 2**31 - 1))
def test_max_pool_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    m = r.integers(0, 4, size=(5, 6)).astype(float)
    score, (a, b) = D.max_pool_similarity(m)
    best = max((m[i, j], -(i * 6 + j), i, j) for i in range(5) for j in range(6))
    assert (score, a, b) == (best[0], best[2], best[3])


def test_max_pool_mask():
    m = np.arange(16.0).reshape(4, 4)
    mask = D.PartGrid(3, 3).interior_mask(4, 4)
    assert D.max_pool_similarity(m, mask) == (10.0, (2, 2))


# full layer


def test_layer_patch_prototype_scores_one():
    grid = D.PartGrid.from_shape("2x2")
    zhat = np.zeros((1, 4, 3, 3))
    for q, (i, j) in enumerate([(0, 0), (0, 2), (2, 0), (2, 2)]):
        zhat[0, q, i, j] = 0.5
    zhat[0, 3, zhat.sum(axis=1)[0] == 0] = 0.5
    parts = zhat[0, :, [0, 0, 2, 2], [0, 2, 0, 2]][None]
    scores, cache = D.layer_forward(zhat, parts, grid)
    assert scores[0, 0] == pytest.approx(1.0)
    assert divmod(int(cache.centers[0, 0]), 3) == (1, 1)


def test_layer_permutation_equivariance(rng):
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 2, 4, 5, 5, 9)
    parts = random_parts(rng, 4, grid, 4)
    branch = branch_with_bias(rng, 4, 3, 9)
    s, _ = D.layer_forward(zhat, parts, grid, branch)
    perm = np.array([2, 0, 3, 1])
    s2, _ = D.layer_forward(zhat, parts[perm], grid, branch)
    np.testing.assert_array_equal(s2, s[:, perm])
    assert np.all(np.abs(s) <= 1 + 1e-5)


def test_layer_rejects_bad_dims(rng):
    grid = D.PartGrid(3, 3)
    with pytest.raises(ValueError):
        D.layer_forward(np.ones((1, 4, 5, 5)), np.ones((1, 9, 3)), grid)
    with pytest.raises(ValueError):
        D.layer_forward(np.ones((1, 4, 2, 2)), np.ones((1, 9, 4)), grid, interior_only=True)


def test_layer_backward_zero_upstream(rng):
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 1, 4, 5, 5, 9)
    _, cache = D.layer_forward(zhat, random_parts(rng, 2, grid, 4), grid,
                               branch_with_bias(rng, 4, 3, 9))
    g = D.layer_backward(cache, np.zeros((1, 2)))
    assert not g.zhat.any() and not g.parts.any()
    assert all(not gw.any() and not gb.any() for gw, gb in g.branch)


def test_part_gradient_is_the_sample_at_the_argmax(rng):
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 1, 4, 4, 4, 9)
    parts = random_parts(rng, 1, grid, 4)
    branch = branch_with_bias(rng, 4, 3, 9)
    _, cache = D.layer_forward(zhat, parts, grid, branch)
    g = D.layer_backward(cache, np.ones((1, 1)))
    a, b = divmod(int(cache.centers[0, 0]), 4)
    np.testing.assert_array_equal(g.parts[0], cache.samples[0, :, :, a, b])

    def f(v):
        return D.layer_forward(zhat, v, grid, branch)[0][0, 0]

    np.testing.assert_allclose(g.parts, finite_difference_gradient(f, parts), rtol=1e-3, atol=1e-5)


def _raw_loss(z, parts, grid, branch, up, eps=1e-5):
    zhat = hs.normalize_locations(hs.augment_epsilon(z, eps), grid.radius).tensor
    return float(np.sum(up * D.layer_forward(zhat, parts, grid, branch)[0]))


@pytest.mark.parametrize("shape", ["3x3", "2x2"])
def test_raw_feature_gradient_through_all_paths(rng, shape):
    grid = D.PartGrid.from_shape(shape)
    z = rng.uniform(0.05, 1.0, size=(2, 3, 5, 5))
    parts = random_parts(rng, 3, grid, 4)
    branch = branch_with_bias(rng, 4, 4, grid.rho)
    up = rng.normal(size=(2, 3))
    z_aug = hs.augment_epsilon(z)
    zhat = hs.normalize_locations(z_aug, grid.radius).tensor
    _, cache = D.layer_forward(zhat, parts, grid, branch)
    g = D.layer_backward(cache, up)
    analytic = hs.normalize_backward(z_aug, grid.radius, g.zhat)[:, :-1]
    num = finite_difference_gradient(lambda v: _raw_loss(v, parts, grid, branch, up), z)
    np.testing.assert_allclose(analytic, num, rtol=1e-3, atol=1e-5)
    # the offset paths matter: dropping them breaks agreement
    direct, _, _ = hs.sample_backward(cache.sample_cache, np.einsum(
        "bpij,pkc->bkcij", D.scatter_to_centers(up, cache.centers, cache.maps.shape), parts))
    assert not np.allclose(hs.normalize_backward(z_aug, grid.radius, direct)[:, :-1], num,
                           rtol=1e-3, atol=1e-5)


def test_branch_weight_gradient_matches_fd(rng):
    grid = D.PartGrid.from_shape("2x2")
    zhat = unit_features(rng, 1, 3, 4, 4, 4)
    parts = random_parts(rng, 2, grid, 3)
    branch = branch_with_bias(rng, 3, 3, 4)
    up = rng.normal(size=(1, 2))
    _, cache = D.layer_forward(zhat, parts, grid, branch)
    g = D.layer_backward(cache, up)
    w2 = branch[1].weight

    def f(v):
        b2 = [branch[0], ConvLayer.same(v, branch[1].bias)]
        return float(np.sum(up * D.layer_forward(zhat, parts, grid, b2)[0]))

    np.testing.assert_allclose(g.branch[1][0], finite_difference_gradient(f, w2), rtol=1e-3,
                               atol=1e-5)


def test_argmax_locality(rng):
    # features no sample at the argmax touches do not change the part gradient
    grid = D.PartGrid(3, 3)
    zhat = unit_features(rng, 1, 4, 8, 8, 9)
    parts = random_parts(rng, 1, grid, 4)
    patch = np.stack([zhat[0, :, 2 + m, 2 + n] for m, n in grid.displacements().astype(int)])
    parts[0] = patch
    _, cache = D.layer_forward(zhat, parts, grid)
    g1 = D.layer_backward(cache, np.ones((1, 1))).parts
    z2 = zhat.copy()
    z2[0, :, 6:, 6:] = z2[0, :, 6:, 6:][::-1]
    _, cache2 = D.layer_forward(z2, parts, grid)
    assert cache2.centers[0, 0] == cache.centers[0, 0]
    np.testing.assert_array_equal(D.layer_backward(cache2, np.ones((1, 1))).parts, g1)


def test_even_sides_need_even_dilation():
    assert D.PartGrid.from_shape("2x3").dilation == 2
    assert D.PartGrid.from_shape("1x1").rho == 1
    with pytest.raises(ValueError):
        D.PartGrid(2, 2, 1)
    with pytest.raises(ValueError):
        D.PartGrid(0, 3)
