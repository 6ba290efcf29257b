"""Rasterizer tests: footprints, splatting vs the dense oracle, pillar baseline, file IO."""

import numpy as np
import pytest

from raybev.errors import FeatureLengthMismatch, FormatError, ShapeMismatch
from raybev.gaussians import Bev2DGaussian
from raybev.rasterizer import (
    BevGridSpec,
    FeatureMap,
    footprint,
    load_feature_map,
    pillar_scatter,
    save_feature_map,
    splat,
    splat_arrays,
    splat_reference,
)

# 32x32 cells, 0.5 m each; cell centers sit at 0.25 + 0.5 * k.
GRID = BevGridSpec(x_min=0.0, x_max=16.0, y_min=0.0, y_max=16.0, cell=0.5, channels=1)
CENTER = np.array([8.25, 8.25])  # center of cell (16, 16)


def random_batch(rng, n, channels, lo=2.0, hi=14.0, scale=0.6):
    means = rng.uniform(lo, hi, size=(n, 2))
    a = rng.normal(0.0, scale, size=(n, 2, 2))
    covs = a @ np.swapaxes(a, 1, 2) + 0.05 * np.eye(2)
    opac = rng.uniform(0.2, 1.0, size=n)
    feats = rng.normal(size=(n, channels))
    return means, covs, opac, feats


def test_footprint_isotropic_unit_sigma_box():
    fp = footprint(CENTER, np.eye(2), GRID, k_sigma=3.0)
    # 3 m half extent = 6 cells each side of the center cell.
    assert (fp.ix_lo, fp.ix_hi, fp.iy_lo, fp.iy_hi) == (10, 22, 10, 22)
    assert fp.ix_hi - fp.ix_lo + 1 == 13
    assert fp.iy_hi - fp.iy_lo + 1 == 13


def test_footprint_anisotropic_box_wider_in_x():
    fp = footprint(CENTER, np.diag([4.0, 1.0]), GRID, k_sigma=3.0)
    nx = fp.ix_hi - fp.ix_lo + 1
    ny = fp.iy_hi - fp.iy_lo + 1
    assert nx == 25 and ny == 13


def test_footprint_off_grid_is_none():
    assert footprint([200.0, 200.0], np.eye(2), GRID) is None
    assert footprint([-100.0, 8.0], np.eye(2), GRID) is None


def test_footprint_subcell_between_centers_is_none():
    # A tiny Gaussian sitting on a cell corner covers no cell center.
    fp = footprint([8.0, 8.0], 1e-4 * np.eye(2), GRID, k_sigma=3.0)
    assert fp is None


def test_footprint_input_validation():
    with pytest.raises(ShapeMismatch):
        footprint([1.0, 2.0, 3.0], np.eye(2), GRID)
    with pytest.raises(ValueError):
        footprint([8.0, 8.0], np.diag([1.0, -1.0]), GRID)


def test_splat_unit_gaussian_center_cell_value():
    g = Bev2DGaussian(mean_xy=CENTER, cov2=np.eye(2), opacity=1.0, feature=np.array([1.0]))
    out = splat([g], GRID)
    assert out.data[0, 16, 16] == 1.0


def test_splat_radially_equidistant_cells_match():
    g = Bev2DGaussian(mean_xy=CENTER, cov2=np.eye(2), opacity=1.0, feature=np.array([1.0]))
    d = splat([g], GRID).data[0]
    vals = [d[16, 18], d[16, 14], d[18, 16], d[14, 16]]
    assert vals[0] > 0
    assert all(v == vals[0] for v in vals)
    diag = [d[18, 18], d[14, 14], d[18, 14], d[14, 18]]
    assert all(v == diag[0] for v in diag)


def test_splat_weight_cutoff_zeroes_far_cells():
    g = Bev2DGaussian(mean_xy=CENTER, cov2=np.eye(2), opacity=1.0, feature=np.array([1.0]))
    d = splat([g], GRID, k_sigma=10.0).data[0]
    # w crosses the 1e-4 default cutoff near r = 4.29 m; cells are 0.5 m.
    assert d[16, 16 + 8] == pytest.approx(np.exp(-8.0), rel=1e-12)
    assert d[16, 16 + 9] == 0.0


def test_splat_matches_dense_oracle():
    grid = BevGridSpec(0.0, 16.0, 0.0, 16.0, 0.25, 3)
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        means, covs, opac, feats = random_batch(rng, 100, grid.channels)
        fast = splat_arrays(means, covs, opac, feats, grid, k_sigma=4.5)
        dense = splat_reference(means, covs, opac, feats, grid)
        worst = max(worst, float(np.abs(fast.data - dense.data).max()))
    assert worst < 1e-9


def test_splat_permutation_bitwise_identical():
    rng = np.random.default_rng(7)
    means, covs, opac, feats = random_batch(rng, 60, 2)
    grid = BevGridSpec(0.0, 16.0, 0.0, 16.0, 0.5, 2)
    base = splat_arrays(means, covs, opac, feats, grid)
    perm = rng.permutation(60)
    shuf = splat_arrays(means[perm], covs[perm], opac[perm], feats[perm], grid)
    assert np.array_equal(base.data, shuf.data)


def test_splat_thread_count_invariant():
    rng = np.random.default_rng(11)
    means, covs, opac, feats = random_batch(rng, 80, 2)
    grid = BevGridSpec(0.0, 16.0, 0.0, 16.0, 0.25, 2)
    one = splat_arrays(means, covs, opac, feats, grid, threads=1)
    four = splat_arrays(means, covs, opac, feats, grid, threads=4)
    assert np.array_equal(one.data, four.data)


def test_splat_linear_in_features():
    rng = np.random.default_rng(3)
    means, covs, opac, _ = random_batch(rng, 40, 2)
    f1 = rng.normal(size=(40, 2))
    f2 = rng.normal(size=(40, 2))
    grid = BevGridSpec(0.0, 16.0, 0.0, 16.0, 0.5, 2)
    joint = splat_arrays(means, covs, opac, f1 + f2, grid)
    parts = splat_arrays(means, covs, opac, f1, grid).data + splat_arrays(means, covs, opac, f2, grid).data
    assert np.abs(joint.data - parts).max() < 1e-9


def test_splat_translation_by_whole_cells_is_exact():
    # Means snapped to 2^-20 and sigma = 0.5 keep every intermediate float
    # exact under a whole-cell shift, so the comparison can be bitwise.
    rng = np.random.default_rng(5)
    n = 20
    means = np.round(rng.uniform(6.0, 10.0, size=(n, 2)) * 2**20) / 2**20
    covs = np.broadcast_to(0.25 * np.eye(2), (n, 2, 2)).copy()
    opac = rng.uniform(0.2, 1.0, size=n)
    feats = rng.normal(size=(n, 1))
    base = splat_arrays(means, covs, opac, feats, GRID)
    shift = np.array([2 * GRID.cell, -3 * GRID.cell])
    moved = splat_arrays(means + shift, covs, opac, feats, GRID)
    # Nothing may touch the clip border in either layout.
    for d in (base.data, moved.data):
        assert not d[:, :3, :].any() and not d[:, -3:, :].any()
        assert not d[:, :, :3].any() and not d[:, :, -3:].any()
    h, w = GRID.height, GRID.width
    assert np.array_equal(moved.data[:, : h - 3, 2:], base.data[:, 3:, : w - 2])


def test_splat_empty_inputs():
    assert not splat([], GRID).data.any()
    out = splat_arrays(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 1)), GRID)
    assert out.data.shape == (1, 32, 32) and not out.data.any()


def test_splat_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        splat_arrays(np.zeros((3, 2)), np.zeros((2, 2, 2)), np.zeros(3), np.zeros((3, 1)), GRID)
    with pytest.raises(FeatureLengthMismatch):
        splat_arrays(np.zeros((3, 2)), np.broadcast_to(np.eye(2), (3, 2, 2)), np.ones(3), np.zeros((3, 4)), GRID)


def test_pillar_single_point_single_cell():
    out = pillar_scatter(np.array([[3.2, 7.9]]), np.array([[2.5]]), GRID)
    assert out.data[0, 15, 6] == 2.5
    assert np.count_nonzero(out.data) == 1


def test_pillar_point_just_inside_boundary():
    # Cell boundary at x = 4.0; a millimeter on either side flips the cell.
    left = pillar_scatter(np.array([[3.999, 0.1]]), np.array([[1.0]]), GRID)
    right = pillar_scatter(np.array([[4.001, 0.1]]), np.array([[1.0]]), GRID)
    assert left.data[0, 0, 7] == 1.0
    assert right.data[0, 0, 8] == 1.0


def test_pillar_max_pools_within_cell():
    pts = np.array([[3.2, 7.9], [3.3, 7.8], [3.1, 7.6]])
    feats = np.array([[1.0], [3.0], [2.0]])
    out = pillar_scatter(pts, feats, GRID)
    assert out.data[0, 15, 6] == 3.0
    neg = pillar_scatter(pts, -feats, GRID)
    assert neg.data[0, 15, 6] == -1.0


def test_pillar_drops_outside_and_accepts_xyz():
    out = pillar_scatter(np.array([[-1.0, 5.0], [20.0, 5.0]]), np.ones((2, 1)), GRID)
    assert not out.data.any()
    xyz = pillar_scatter(np.array([[3.2, 7.9, 1.7]]), np.array([[2.5]]), GRID)
    assert xyz.data[0, 15, 6] == 2.5


def test_pillar_feature_mismatch():
    with pytest.raises(FeatureLengthMismatch):
        pillar_scatter(np.zeros((2, 2)), np.zeros((2, 3)), GRID)


def test_splat_covers_at_least_pillar_cells():
    rng = np.random.default_rng(2)
    n = 30
    pts = rng.uniform(2.0, 14.0, size=(n, 2))
    covs = np.broadcast_to(0.16 * np.eye(2), (n, 2, 2)).copy()
    feats = np.ones((n, 1))
    fat = splat_arrays(pts, covs, np.ones(n), feats, GRID)
    thin = pillar_scatter(pts, feats, GRID)
    n_splat = np.count_nonzero(fat.data[0])
    n_pillar = np.count_nonzero(thin.data[0])
    assert n_pillar <= n
    assert n_splat > n_pillar


def test_feature_map_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    grid = BevGridSpec(-4.0, 4.0, 0.0, 2.0, 0.25, 3)
    fmap = FeatureMap(rng.normal(size=(3, 8, 32)), grid)
    path = tmp_path / "map.fmap"
    save_feature_map(path, fmap)
    back = load_feature_map(path)
    assert back.grid == grid
    # Storage is float32; the round trip is exact at that precision.
    assert np.array_equal(back.data, fmap.data.astype("<f4").astype(np.float64))


def test_feature_map_format_errors(tmp_path):
    p = tmp_path / "bad.fmap"
    p.write_bytes(b"not a feature map at all")
    with pytest.raises(FormatError):
        load_feature_map(p)
    good = tmp_path / "good.fmap"
    save_feature_map(good, FeatureMap.zeros(GRID))
    raw = good.read_bytes()
    (tmp_path / "short.fmap").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_feature_map(tmp_path / "short.fmap")


def test_grid_validation_and_centers():
    with pytest.raises(ValueError):
        BevGridSpec(0.0, 16.0, 0.0, 16.0, -0.5, 1)
    with pytest.raises(ValueError):
        BevGridSpec(0.0, 16.3, 0.0, 16.0, 0.5, 1)
    with pytest.raises(ValueError):
        BevGridSpec(0.0, 16.0, 0.0, 16.0, 0.5, 0)
    assert GRID.width == 32 and GRID.height == 32
    assert GRID.x_centers()[0] == 0.25 and GRID.x_centers()[-1] == 15.75
