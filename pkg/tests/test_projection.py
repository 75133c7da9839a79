"""View transforms and the two transfer operators against literal oracles."""

import numpy as np
import pytest

from pointgrid import autodiff as ad
from pointgrid.autodiff import Tensor, backward, precision, reset_graph
from pointgrid.pointcloud import PointCloud
from pointgrid.projection import (
    GridSpec,
    coverage_stats,
    g2p_bilinear,
    p2g_scatter_max,
    point_input_features,
    project_bev,
    project_rv,
)


@pytest.fixture(autouse=True)
def clean_graph():
    reset_graph()
    yield
    reset_graph()


def rng_for(seed):
    return np.random.default_rng(np.random.PCG64(seed))


def cloud_from(xyz, intensity=None, labels=None):
    xyz = np.asarray(xyz, dtype=np.float64)
    if intensity is None:
        intensity = np.zeros(len(xyz))
    return PointCloud(xyz=xyz, intensity=np.asarray(intensity, dtype=np.float64),
                      labels=labels)


BEV600 = GridSpec.bev(600, 600, -50.0, -50.0, 50.0, 50.0)
RV2048 = GridSpec.rv(2048, 64)


def test_bev_lower_corner_maps_to_origin():
    idx = project_bev(cloud_from([[-50.0, -50.0, 0.0]]), BEV600)
    assert idx.u[0] == 0.0 and idx.v[0] == 0.0 and idx.in_range[0]


def test_bev_center_point():
    idx = project_bev(cloud_from([[0.0, 0.0, 0.0]]), BEV600)
    assert idx.u[0] == 300.0 and idx.v[0] == 300.0


def test_bev_upper_edge_is_out_of_range():
    idx = project_bev(cloud_from([[50.0, 0.0, 0.0]]), BEV600)
    assert idx.u[0] == 600.0 and not idx.in_range[0]


def test_rv_forward_axis_hits_center_column():
    idx = project_rv(cloud_from([[1.0, 0.0, 0.0]]), RV2048)
    assert idx.u[0] == 1024.0
    assert idx.r[0] == 1.0 and idx.phi[0] == 0.0


def test_rv_lowest_beam_masked_by_half_open_bound():
    f_down = RV2048.f_down
    r = 5.0
    z = -r * np.sin(f_down)
    xy = r * np.cos(f_down)
    idx = project_rv(cloud_from([[xy, 0.0, z]]), RV2048)
    np.testing.assert_allclose(idx.v[0], 64.0, atol=1e-9)
    assert not idx.in_range[0]
    slightly_up = project_rv(cloud_from([[xy, 0.0, z + 1e-4]]), RV2048)
    assert slightly_up.in_range[0] and slightly_up.v[0] < 64.0


def test_rv_origin_point_is_masked_not_nan():
    idx = project_rv(cloud_from([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]), RV2048)
    assert not idx.in_range[0] and idx.in_range[1]
    assert np.isfinite(idx.u).all() and np.isfinite(idx.v).all()


def test_rv_spherical_inverse_roundtrip():
    rng = rng_for(5)
    xyz = rng.normal(size=(500, 3)) * 20
    keep = np.linalg.norm(xyz, axis=1) > 1e-6
    xyz = xyz[keep]
    idx = project_rv(cloud_from(xyz), RV2048)
    back = np.column_stack([
        idx.r * np.cos(idx.theta) * np.cos(idx.phi),
        idx.r * np.cos(idx.theta) * np.sin(idx.phi),
        idx.r * np.sin(idx.theta),
    ])
    np.testing.assert_allclose(back, xyz, atol=1e-5)


def scatter_oracle(feats, index, spec):
    """Literal per-cell set building followed by channelwise max."""
    h, w = spec.height, spec.width
    c = feats.shape[1]
    cells = {}
    for k in range(feats.shape[0]):
        if not index.in_range[k]:
            continue
        key = (int(np.floor(index.v[k])), int(np.floor(index.u[k])))
        cells.setdefault(key, []).append(k)
    grid = np.zeros((h, w, c), dtype=feats.dtype)
    argmax = np.full((h, w, c), -1, dtype=np.int64)
    for (row, col), members in cells.items():
        for ch in range(c):
            vals = [feats[k, ch] for k in members]
            best = max(vals)
            grid[row, col, ch] = best
            argmax[row, col, ch] = min(
                k for k, v in zip(members, vals) if v == best
            )
    return grid, argmax


def random_instance(rng, n=50, h=8, w=8, c=4):
    spec = GridSpec.bev(w, h, -1.0, -1.0, 1.0, 1.0)
    xyz = np.column_stack([
        rng.uniform(-1.3, 1.3, n),
        rng.uniform(-1.3, 1.3, n),
        rng.normal(size=n),
    ])
    index = project_bev(xyz, spec)
    feats = rng.normal(size=(n, c))
    return spec, index, feats


def test_scatter_max_two_points_one_cell():
    spec = GridSpec.bev(4, 4, 0.0, 0.0, 4.0, 4.0)
    xyz = [[1.2, 1.8, 0.0], [1.7, 1.3, 0.0]]
    index = project_bev(cloud_from(xyz), spec)
    feats = Tensor(np.array([[1.0], [3.0]]), requires_grad=True)
    grid, record = p2g_scatter_max(feats, index, spec)
    assert grid.data[1, 1, 0] == 3.0
    assert record.argmax[1, 1, 0] == 1
    backward(ad.sum_all(grid))
    assert feats.grad[1, 0] == 1.0 and feats.grad[0, 0] == 0.0


def test_scatter_max_empty_cells_zero():
    spec = GridSpec.bev(3, 3, 0.0, 0.0, 3.0, 3.0)
    index = project_bev(cloud_from([[0.5, 0.5, 0.0]]), spec)
    feats = Tensor(np.array([[-2.0]]))
    grid, record = p2g_scatter_max(feats, index, spec)
    assert grid.data[0, 0, 0] == -2.0  # negative max preserved, not clamped
    assert grid.data[1, 1, 0] == 0.0 and record.argmax[1, 1, 0] == -1


def test_scatter_max_matches_set_oracle():
    rng = rng_for(11)
    with precision("float64"):
        for _ in range(50):
            spec, index, feats = random_instance(rng)
            grid, record = p2g_scatter_max(Tensor(feats), index, spec)
            ref_grid, ref_arg = scatter_oracle(feats, index, spec)
            assert np.array_equal(grid.data, ref_grid)
            assert np.array_equal(record.argmax, ref_arg)


def test_scatter_max_tie_goes_to_lowest_index():
    spec = GridSpec.bev(2, 2, 0.0, 0.0, 2.0, 2.0)
    xyz = [[0.2, 0.2, 0.0], [0.7, 0.7, 0.0], [0.5, 0.5, 0.0]]
    index = project_bev(cloud_from(xyz), spec)
    feats = Tensor(np.array([[5.0], [5.0], [1.0]]), requires_grad=True)
    grid, record = p2g_scatter_max(feats, index, spec)
    assert record.argmax[0, 0, 0] == 0
    backward(ad.sum_all(grid))
    np.testing.assert_array_equal(feats.grad.ravel(), [1.0, 0.0, 0.0])


def test_scatter_max_permutation_invariant_values():
    rng = rng_for(12)
    spec, index, feats = random_instance(rng, n=30)
    perm = rng.permutation(30)
    xyz = np.column_stack([index.u, index.v, np.zeros(30)])  # rebuild via grid coords
    # permute the underlying points and re-project
    spec2 = spec
    grid_a, _ = p2g_scatter_max(Tensor(feats), index, spec)
    from pointgrid.projection import ProjectionIndex

    index_p = ProjectionIndex(spec=spec2, u=index.u[perm], v=index.v[perm],
                              in_range=index.in_range[perm])
    grid_b, _ = p2g_scatter_max(Tensor(feats[perm]), index_p, spec2)
    assert np.array_equal(grid_a.data, grid_b.data)


def test_scatter_max_monotone_in_features():
    rng = rng_for(13)
    spec, index, feats = random_instance(rng, n=25)
    grid_a, _ = p2g_scatter_max(Tensor(feats), index, spec)
    k = int(np.flatnonzero(index.in_range)[0])
    feats2 = feats.copy()
    feats2[k, 2] += 1.5
    grid_b, _ = p2g_scatter_max(Tensor(feats2), index, spec)
    assert np.all(grid_b.data >= grid_a.data - 1e-12)


def test_scatter_then_gather_roundtrip_on_exact_cell_corner():
    spec = GridSpec.bev(4, 4, 0.0, 0.0, 4.0, 4.0)
    index = project_bev(cloud_from([[2.0, 1.0, 0.0]]), spec)
    assert index.u[0] == 2.0 and index.v[0] == 1.0  # exactly the cell corner
    feats = Tensor(np.array([[0.7, -1.2]]))
    grid, _ = p2g_scatter_max(feats, index, spec)
    back = g2p_bilinear(grid, index, spec)
    np.testing.assert_array_equal(back.data, feats.data)


def test_bev_flip_equivariance():
    rng = rng_for(14)
    spec = GridSpec.bev(8, 6, -2.0, -1.5, 2.0, 1.5)
    n = 40
    xyz = np.column_stack([
        rng.uniform(-2.2, 2.2, n), rng.uniform(-1.7, 1.7, n), rng.normal(size=n)
    ])
    feats = rng.normal(size=(n, 3))
    # keep points off the cell boundary lattice so flipping is exact
    idx = project_bev(xyz, spec)
    frac_u = idx.u - np.floor(idx.u)
    keep = (np.abs(frac_u) > 1e-6) & (np.abs(idx.u) > 1e-6)
    xyz, feats = xyz[keep], feats[keep]

    grid, _ = p2g_scatter_max(Tensor(feats), project_bev(xyz, spec), spec)
    flipped = xyz.copy()
    flipped[:, 0] *= -1
    grid_f, _ = p2g_scatter_max(Tensor(feats), project_bev(flipped, spec), spec)
    np.testing.assert_allclose(grid_f.data, grid.data[:, ::-1, :], atol=1e-6)


def bilinear_oracle(grid, index, spec):
    n = index.n
    c = grid.shape[2]
    out = np.zeros((n, c), dtype=grid.dtype)
    for k in range(n):
        u, v = index.u[k], index.v[k]
        if not (np.isfinite(u) and np.isfinite(v)):
            continue
        i0, j0 = int(np.floor(u)), int(np.floor(v))
        for di in (0, 1):
            for dj in (0, 1):
                col, row = i0 + di, j0 + dj
                if not (0 <= col < spec.width and 0 <= row < spec.height):
                    continue
                w = (1 - abs(u - (i0 + di))) * (1 - abs(v - (j0 + dj)))
                out[k] += w * grid[row, col, :]
    return out


def test_bilinear_on_node_returns_cell_value():
    spec = GridSpec.bev(4, 4, 0.0, 0.0, 4.0, 4.0)
    rng = rng_for(15)
    grid = Tensor(rng.normal(size=(4, 4, 2)))
    index = project_bev(cloud_from([[2.0, 3.0, 0.0]]), spec)
    out = g2p_bilinear(grid, index, spec)
    np.testing.assert_array_equal(out.data[0], grid.data[3, 2, :])


def test_bilinear_center_averages_four_neighbors():
    spec = GridSpec.bev(4, 4, 0.0, 0.0, 4.0, 4.0)
    rng = rng_for(16)
    grid = Tensor(rng.normal(size=(4, 4, 1)))
    index = project_bev(cloud_from([[1.5, 2.5, 0.0]]), spec)
    out = g2p_bilinear(grid, index, spec)
    expect = 0.25 * (
        grid.data[2, 1, 0] + grid.data[2, 2, 0] + grid.data[3, 1, 0] + grid.data[3, 2, 0]
    )
    np.testing.assert_allclose(out.data[0, 0], expect, rtol=1e-6)


def test_bilinear_partial_overlap_reads_inside_part():
    spec = GridSpec.bev(3, 3, 0.0, 0.0, 3.0, 3.0)
    grid = Tensor(np.ones((3, 3, 1)))
    # just outside the left edge: u=-0.5 has one valid neighbor column (0)
    index = project_bev(cloud_from([[-0.5, 1.5, 0.0]]), spec)
    assert not index.in_range[0]
    out = g2p_bilinear(grid, index, spec)
    np.testing.assert_allclose(out.data[0, 0], 0.5, rtol=1e-6)


def test_bilinear_far_point_reads_zeros():
    spec = GridSpec.bev(3, 3, 0.0, 0.0, 3.0, 3.0)
    grid = Tensor(np.ones((3, 3, 1)))
    index = project_bev(cloud_from([[25.0, 25.0, 0.0]]), spec)
    out = g2p_bilinear(grid, index, spec)
    assert out.data[0, 0] == 0.0


def test_bilinear_constant_grid_interior():
    spec = GridSpec.bev(6, 6, 0.0, 0.0, 6.0, 6.0)
    grid = Tensor(np.full((6, 6, 2), 3.5))
    rng = rng_for(17)
    xyz = np.column_stack([
        rng.uniform(1.0, 4.9, 30), rng.uniform(1.0, 4.9, 30), np.zeros(30)
    ])
    out = g2p_bilinear(grid, project_bev(xyz, spec), spec)
    np.testing.assert_allclose(out.data, 3.5, rtol=1e-6)


def test_bilinear_matches_literal_oracle():
    rng = rng_for(18)
    with precision("float64"):
        for _ in range(50):
            spec = GridSpec.bev(7, 5, 0.0, 0.0, 7.0, 5.0)
            grid = rng.normal(size=(5, 7, 3))
            xyz = np.column_stack([
                rng.uniform(-1.5, 8.5, 20), rng.uniform(-1.5, 6.5, 20), np.zeros(20)
            ])
            index = project_bev(xyz, spec)
            out = g2p_bilinear(Tensor(grid), index, spec)
            np.testing.assert_allclose(out.data, bilinear_oracle(grid, index, spec),
                                       atol=1e-12)


def test_bilinear_backward_splits_by_weight():
    with precision("float64"):
        spec = GridSpec.bev(3, 3, 0.0, 0.0, 3.0, 3.0)
        grid = Tensor(np.zeros((3, 3, 1)), requires_grad=True)
        index = project_bev(cloud_from([[0.75, 1.25, 0.0]]), spec)
        out = g2p_bilinear(grid, index, spec)
        backward(ad.sum_all(out))
        g = grid.grad[:, :, 0]
        np.testing.assert_allclose(g[1, 0], 0.25 * 0.75, atol=1e-12)
        np.testing.assert_allclose(g[1, 1], 0.75 * 0.75, atol=1e-12)
        np.testing.assert_allclose(g[2, 0], 0.25 * 0.25, atol=1e-12)
        np.testing.assert_allclose(g[2, 1], 0.75 * 0.25, atol=1e-12)
        np.testing.assert_allclose(g.sum(), 1.0, atol=1e-12)


def test_coverage_all_inside():
    cloud = cloud_from([[5.0, 0.0, 0.0], [5.0, 5.0, -1.0]])
    spec_rv = GridSpec.rv(64, 16)
    stats = coverage_stats(cloud, BEV600, spec_rv)
    assert stats == {"in_bev": 1.0, "in_rv": 1.0, "in_both": 1.0, "in_either": 1.0}


def test_coverage_counting_oracle():
    rng = rng_for(19)
    n = 400
    xyz = np.column_stack([
        rng.uniform(-80, 80, n), rng.uniform(-80, 80, n), rng.uniform(-3, 3, n)
    ])
    cloud = cloud_from(xyz)
    stats = coverage_stats(cloud, BEV600, RV2048)

    # independent membership counting straight from the defining inequalities
    bev = ((xyz[:, 0] >= -50) & (xyz[:, 0] < 50)
           & (xyz[:, 1] >= -50) & (xyz[:, 1] < 50))
    r = np.linalg.norm(xyz, axis=1)
    theta = np.arcsin(xyz[:, 2] / np.where(r > 0, r, 1.0))
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    rv = ((r > 0) & (theta > -RV2048.f_down) & (theta <= RV2048.f_up)
          & (phi > -np.pi))
    assert stats["in_bev"] == bev.sum() / n
    assert stats["in_rv"] == rv.sum() / n
    assert stats["in_both"] == (bev & rv).sum() / n
    assert stats["in_either"] == (bev | rv).sum() / n
    assert 0 < stats["in_both"] < 1  # scene exercises both sides


def test_coverage_empty_cloud():
    cloud = cloud_from(np.zeros((0, 3)))
    stats = coverage_stats(cloud, BEV600, RV2048)
    assert all(v == 0.0 for v in stats.values())


def test_point_features_columns_and_offsets():
    spec_bev = GridSpec.bev(10, 10, -5.0, -5.0, 5.0, 5.0)  # 1 m cells
    spec_rv = GridSpec.rv(64, 16)
    xyz = np.array([[0.5, 0.5, 0.0]])  # exactly a bev cell center
    cloud = cloud_from(xyz, intensity=[0.25])
    bev_idx = project_bev(cloud, spec_bev)
    rv_idx = project_rv(cloud, spec_rv)
    feats = point_input_features(cloud, bev_idx, rv_idx).data
    assert feats.shape == (1, 9)
    np.testing.assert_allclose(feats[0, :4], [0.5, 0.5, 0.0, 0.25], atol=1e-6)
    np.testing.assert_allclose(feats[0, 4], np.sqrt(0.5), rtol=1e-6)  # r column
    np.testing.assert_allclose(feats[0, 5:7], 0.0, atol=1e-6)  # dx, dy at center


def test_point_features_offsets_bounded_by_half_cell():
    rng = rng_for(20)
    spec_bev = GridSpec.bev(16, 16, -8.0, -8.0, 8.0, 8.0)
    spec_rv = GridSpec.rv(128, 16)
    xyz = rng.normal(size=(300, 3)) * 5
    cloud = cloud_from(xyz, intensity=rng.uniform(0, 1, 300))
    feats = point_input_features(
        cloud, project_bev(cloud, spec_bev), project_rv(cloud, spec_rv)
    ).data
    half_x = 0.5 * 16.0 / 16
    assert np.all(np.abs(feats[:, 5]) <= half_x + 1e-6)
    assert np.all(np.abs(feats[:, 6]) <= half_x + 1e-6)
    half_phi = np.pi / 128
    half_theta = spec_rv.f / (2 * 16)
    assert np.all(np.abs(feats[:, 7]) <= half_theta + 1e-9)
    assert np.all(np.abs(feats[:, 8]) <= half_phi + 1e-9)


def test_point_features_zero_offsets_outside_view():
    spec_bev = GridSpec.bev(4, 4, -1.0, -1.0, 1.0, 1.0)
    spec_rv = GridSpec.rv(64, 16)
    xyz = np.array([[30.0, 30.0, 0.0]])  # outside bev, inside rv
    cloud = cloud_from(xyz)
    bev_idx = project_bev(cloud, spec_bev)
    feats = point_input_features(cloud, bev_idx, project_rv(cloud, spec_rv)).data
    assert not bev_idx.in_range[0]
    assert feats[0, 5] == 0.0 and feats[0, 6] == 0.0
    assert feats[0, 7] != 0.0 or feats[0, 8] != 0.0


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec.bev(0, 4, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        GridSpec.bev(4, 4, 1.0, 0.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        GridSpec.rv(64, 16, f_up=0.0, f_down=0.0)
    with pytest.raises(ValueError):
        GridSpec("diag", 4, 4)
    with pytest.raises(ValueError):
        project_bev(cloud_from([[0, 0, 0]]), RV2048)
    with pytest.raises(ValueError):
        project_rv(cloud_from([[0, 0, 0]]), BEV600)
