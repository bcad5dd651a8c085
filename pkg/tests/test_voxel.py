import numpy as np
import pytest

from oracles import (
    devoxelize_nearest_oracle,
    devoxelize_trilinear_oracle,
    distinguishable_oracle,
    trilinear_oracle,
    voxelize_bruteforce,
)
from pvconv.cloud import NormalizedCloud, PointCloud, SyntheticSpec, generate_synthetic, normalize
from pvconv.tensor import grad_check
from pvconv.voxel import (
    CORNERS,
    VoxelGrid,
    count_distinguishable,
    devoxelize_nearest,
    devoxelize_nearest_backward,
    devoxelize_trilinear,
    devoxelize_trilinear_backward,
    trilinear_weights,
    voxelize,
    voxelize_backward,
)


def nc_of(coords, feats):
    coords = np.asarray(coords, dtype=float)
    feats = np.asarray(feats, dtype=float).reshape(len(coords), -1)
    return NormalizedCloud(coords, feats, np.zeros(3), 1.0)


def random_nc(rng, n, c):
    return nc_of(rng.random((n, 3)), rng.standard_normal((n, c)))


def test_voxelize_single_point():
    grid = voxelize(nc_of([[0.1, 0.1, 0.1]], [3.0]), 2)
    assert grid.values[0, 0, 0, 0] == 3.0 and grid.counts[0, 0, 0] == 1
    assert grid.counts.sum() == 1 and np.count_nonzero(grid.values) == 1


def test_voxelize_mean_of_two():
    grid = voxelize(nc_of([[0.1, 0.1, 0.1], [0.2, 0.3, 0.4]], [2.0, 4.0]), 2)
    assert grid.values[0, 0, 0, 0] == 3.0 and grid.counts[0, 0, 0] == 2


def test_voxelize_zero_resolution():
    with pytest.raises(ValueError):
        voxelize(nc_of([[0.1, 0.1, 0.1]], [1.0]), 0)


def test_voxelize_matches_bruteforce():
    rng = np.random.default_rng(10)
    nc = random_nc(rng, 16, 2)
    grid = voxelize(nc, 4)
    values, counts = voxelize_bruteforce(nc.coords_hat, nc.features, 4)
    np.testing.assert_array_equal(grid.counts, counts)
    np.testing.assert_allclose(grid.values, values, atol=1e-12, rtol=0)


def test_voxelize_invariants():
    rng = np.random.default_rng(11)
    nc = random_nc(rng, 100, 3)
    grid = voxelize(nc, 3)
    assert grid.counts.sum() == 100
    assert np.all(grid.values[grid.counts == 0] == 0)


def test_voxelize_backward_examples():
    nc = nc_of([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]], [1.0, 2.0])
    grid = voxelize(nc, 2)
    np.testing.assert_array_equal(voxelize_backward(np.ones((2, 2, 2, 1)), nc, grid), [[1.0], [1.0]])
    nc = nc_of([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], [1.0, 2.0])
    grid = voxelize(nc, 2)
    np.testing.assert_array_equal(voxelize_backward(np.ones((2, 2, 2, 1)), nc, grid), [[0.5], [0.5]])


def test_voxelize_backward_shape_error():
    nc = nc_of([[0.1, 0.1, 0.1]], [1.0])
    grid = voxelize(nc, 2)
    with pytest.raises(ValueError):
        voxelize_backward(np.ones((3, 3, 3, 1)), nc, grid)


def test_voxelize_backward_grad_check():
    rng = np.random.default_rng(12)
    nc = random_nc(rng, 20, 2)

    def fwd(f):
        return voxelize(nc.with_features(f), 3).values

    def bwd(f, g):
        return voxelize_backward(g, nc.with_features(f), voxelize(nc.with_features(f), 3))

    assert grad_check(fwd, bwd, nc.features, 1e-5).passed


def test_trilinear_at_center():
    r = 4
    tw = trilinear_weights(np.array([1.5, 2.5, 0.5]) / r, r)
    assert tw.base_index == (1, 2, 0)
    np.testing.assert_allclose(tw.weights, np.eye(8)[0], atol=1e-12)


def test_trilinear_midway_along_x():
    r = 4
    tw = trilinear_weights(np.array([2.0, 1.5, 1.5]) / r, r)
    nonzero = np.flatnonzero(tw.weights > 1e-12)
    np.testing.assert_allclose(tw.weights[nonzero], [0.5, 0.5])
    assert {tuple(CORNERS[j]) for j in nonzero} == {(0, 0, 0), (1, 0, 0)}


def test_trilinear_matches_product_oracle():
    rng = np.random.default_rng(13)
    for _ in range(20):
        p = rng.random(3)
        tw = trilinear_weights(p, 8)
        assert abs(tw.weights.sum() - 1) <= 1e-12
        assert np.all((tw.weights >= 0) & (tw.weights <= 1))
        expected = trilinear_oracle(p, 8)
        got = {}
        for j in range(8):
            key = tuple(int(v) for v in np.array(tw.base_index) + CORNERS[j])
            got[key] = got.get(key, 0.0) + tw.weights[j]
        assert set(got) == set(expected)
        for key in got:
            assert abs(got[key] - expected[key]) <= 1e-12


def test_trilinear_outside_cube():
    with pytest.raises(ValueError):
        trilinear_weights(np.array([1.2, 0.5, 0.5]), 4)


def test_devoxelize_constant_grid():
    rng = np.random.default_rng(14)
    nc = random_nc(rng, 30, 2)
    grid = VoxelGrid(5, np.full((5, 5, 5, 2), 1.75), np.ones((5, 5, 5), int), np.zeros(30, int))
    np.testing.assert_allclose(devoxelize_trilinear(grid, nc), 1.75, atol=1e-12)


def test_devoxelize_round_trip_at_center():
    r = 4
    nc = nc_of([[(1 + 0.5) / r, (2 + 0.5) / r, (3 + 0.5) / r]], [[2.5, -1.0]])
    out = devoxelize_trilinear(voxelize(nc, r), nc)
    np.testing.assert_array_equal(out, nc.features)


def test_devoxelize_trilinear_matches_oracle():
    rng = np.random.default_rng(15)
    for r in (1, 2, 5):
        nc = random_nc(rng, 12, 3)
        values = rng.standard_normal((r, r, r, 3))
        grid = VoxelGrid(r, values, np.ones((r, r, r), int), np.zeros(12, int))
        np.testing.assert_allclose(devoxelize_trilinear(grid, nc),
                                   devoxelize_trilinear_oracle(values, nc.coords_hat, r), atol=1e-12)


def test_devoxelize_trilinear_backward_grad_check():
    rng = np.random.default_rng(16)
    nc = random_nc(rng, 15, 2)
    base = voxelize(nc, 4)

    def grid_with(v):
        return VoxelGrid(4, v, base.counts, base.point_index)

    rep = grad_check(lambda v: devoxelize_trilinear(grid_with(v), nc),
                     lambda v, g: devoxelize_trilinear_backward(g, grid_with(v), nc),
                     rng.standard_normal(base.values.shape), 1e-5)
    assert rep.passed


def test_devoxelize_nearest_properties():
    rng = np.random.default_rng(17)
    nc = nc_of([[0.1, 0.1, 0.1], [0.2, 0.15, 0.05], [0.9, 0.9, 0.9]], [[1.0], [3.0], [7.0]])
    out = devoxelize_nearest(voxelize(nc, 2), nc)
    np.testing.assert_array_equal(out[0], out[1])
    assert out[2, 0] == 7.0
    nc = random_nc(rng, 25, 2)
    values = rng.standard_normal((3, 3, 3, 2))
    grid = VoxelGrid(3, values, np.ones((3, 3, 3), int), np.zeros(25, int))
    np.testing.assert_array_equal(devoxelize_nearest(grid, nc),
                                  devoxelize_nearest_oracle(values, nc.coords_hat, 3))


def test_devoxelize_nearest_backward_adjoint():
    rng = np.random.default_rng(18)
    nc = random_nc(rng, 25, 2)
    x = rng.standard_normal((3, 3, 3, 2))
    y = rng.standard_normal((25, 2))
    grid = VoxelGrid(3, x, np.ones((3, 3, 3), int), np.zeros(25, int))
    lhs = np.sum(devoxelize_nearest(grid, nc) * y)
    rhs = np.sum(x * devoxelize_nearest_backward(y, grid, nc))
    assert abs(lhs - rhs) <= 1e-9


def test_count_distinguishable_examples():
    coords = np.array([[0.1, 0.1, 0.1], [0.6, 0.1, 0.1], [0.1, 0.6, 0.6]])
    assert count_distinguishable(nc_of(coords, np.zeros(3)), 2) == 3
    same = nc_of(np.full((5, 3), 0.3), np.zeros(5))
    assert all(count_distinguishable(same, r) == 0 for r in (1, 2, 64, 256))


def test_count_distinguishable_matches_hash_oracle():
    nc = normalize(generate_synthetic(SyntheticSpec("uniform_cube", 2048, 42)))
    assert count_distinguishable(nc, 8) == distinguishable_oracle(nc.coords_hat, 8)


def test_normalized_clouds_voxelize():
    pc = PointCloud(np.random.default_rng(19).standard_normal((40, 3)) * 10, np.ones((40, 1)))
    grid = voxelize(normalize(pc), 4)
    assert grid.counts.sum() == 40
