"""Synthetic lab tests: scenes, radar simulation, targets, images, ablation harness."""

import numpy as np
import pytest

from raybev.errors import FormatError, PlacementFailure, ShapeMismatch
from raybev.geometry import rotation_z
from raybev.grad import TrainConfig
from raybev.rasterizer import BevGridSpec, splat_arrays
from raybev.synthlab import (
    AblationCell,
    Box,
    BoxClass,
    ExperimentSpec,
    ImageSpec,
    SceneSpec,
    SimConfig,
    default_camera,
    default_experiments,
    load_pyramid,
    make_feature_image,
    make_scene,
    parse_report,
    render_target,
    run_ablation,
    sample_scene,
    save_pyramid,
    simulate_radar,
)
from raybev.encoder import EncoderConfig

GRID1 = BevGridSpec(0.0, 25.6, -12.8, 12.8, 0.4, 1)
GRID3 = BevGridSpec(0.0, 25.6, -12.8, 12.8, 0.4, 3)

NOISE_FREE = SimConfig(points_per_box=(12, 12), sigma_r=0.0, sigma_theta=0.0, sigma_phi=0.0, clutter_points=0)


def box_frame_residual(point_xy, box):
    """Distance of a point from the box footprint boundary, in box axes."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    dx, dy = point_xy[0] - box.center[0], point_xy[1] - box.center[1]
    bx = c * dx + s * dy
    by = -s * dx + c * dy
    return max(abs(bx) - box.size[0] / 2.0, abs(by) - box.size[1] / 2.0)


def nearest_box(point_xy, boxes):
    return min(boxes, key=lambda b: abs(box_frame_residual(point_xy, b)))


def test_sample_scene_empty_and_bounds():
    rng = np.random.default_rng(0)
    assert sample_scene(SceneSpec(n_boxes=0), rng) == []
    spec = SceneSpec(n_boxes=1, x_range=(5.0, 9.0), y_range=(-2.0, 2.0))
    (box,) = sample_scene(spec, rng)
    assert 5.0 <= box.center[0] <= 9.0 and -2.0 <= box.center[1] <= 2.0
    cls = spec.classes[box.class_id]
    assert cls.length[0] <= box.size[0] <= cls.length[1]
    assert cls.width[0] <= box.size[1] <= cls.width[1]
    assert box.center[2] == pytest.approx(box.size[2] / 2.0)


def test_sample_scene_min_gap_and_determinism():
    spec = SceneSpec(n_boxes=8, x_range=(4.0, 40.0), y_range=(-20.0, 20.0), min_gap=6.0)
    a = sample_scene(spec, np.random.default_rng(42))
    b = sample_scene(spec, np.random.default_rng(42))
    for i in range(8):
        assert np.array_equal(a[i].center, b[i].center) and a[i].yaw == b[i].yaw
    centers = np.array([bx.center[:2] for bx in a])
    for i in range(8):
        for j in range(i + 1, 8):
            assert np.hypot(*(centers[i] - centers[j])) >= 6.0


def test_sample_scene_placement_failure():
    spec = SceneSpec(n_boxes=4, x_range=(5.0, 6.0), y_range=(-0.5, 0.5), min_gap=10.0)
    with pytest.raises(PlacementFailure):
        sample_scene(spec, np.random.default_rng(0), max_tries=50)


def test_tangential_yaw_faces_across_the_ray():
    spec = SceneSpec(n_boxes=6, x_range=(5.0, 30.0), y_range=(-15.0, 15.0), min_gap=4.0,
                     yaw_mode="tangential", yaw_jitter=0.0)
    for box in sample_scene(spec, np.random.default_rng(3)):
        expected = np.arctan2(box.center[1], box.center[0]) + 0.5 * np.pi
        assert box.yaw == pytest.approx(expected, abs=1e-12)


def test_noise_free_points_lie_on_surfaces():
    spec = SceneSpec(n_boxes=3, x_range=(4.0, 22.0), y_range=(-10.0, 10.0), min_gap=5.0)
    rng = np.random.default_rng(1)
    boxes = sample_scene(spec, rng)
    pts = simulate_radar(boxes, NOISE_FREE, rng)
    assert pts.shape == (36, 7)
    for row in pts:
        assert abs(box_frame_residual(row[:2], nearest_box(row[:2], boxes))) < 1e-9
    # Static scene, static ego: zero Doppler and zero frame age everywhere.
    assert not pts[:, 4].any() and not pts[:, 5].any()


def test_static_scene_survives_ego_motion_realignment():
    spec = SceneSpec(n_boxes=2, x_range=(8.0, 20.0), y_range=(-6.0, 6.0), min_gap=5.0)
    rng = np.random.default_rng(2)
    boxes = sample_scene(spec, rng)
    sim = SimConfig(points_per_box=(10, 10), sigma_r=0.0, sigma_theta=0.0, sigma_phi=0.0,
                    frames=3, frame_dt=0.2, ego_speed=6.0, ego_yaw_rate=0.3, clutter_points=0)
    pts = simulate_radar(boxes, sim, rng)
    for row in pts:
        assert abs(box_frame_residual(row[:2], nearest_box(row[:2], boxes))) < 1e-9


def test_multiframe_motion_trail_kinematics():
    box = Box(center=np.array([15.0, 0.0, 0.75]), size=np.array([4.4, 1.8, 1.5]),
              yaw=0.0, velocity=np.array([5.0, 0.0]), class_id=0)
    sim = SimConfig(points_per_box=(600, 600), sigma_r=0.0, sigma_theta=0.0, sigma_phi=0.0,
                    frames=3, frame_dt=0.1, clutter_points=0)
    pts = simulate_radar([box], sim, np.random.default_rng(4))
    ages = sorted(set(pts[:, 5]))
    assert ages == pytest.approx([0.0, 0.1, 0.2])
    means = {}
    for age in ages:
        group = pts[pts[:, 5] == age]
        assert group.shape[0] == 600
        # Undoing the age displacement puts every point exactly on the surface.
        undone = group[:, :2] + box.velocity[None, :] * age
        for p in undone:
            assert abs(box_frame_residual(p, box)) < 1e-9
        means[age] = group[:, 0].mean()
    # 5 m/s and 0.1 s frame spacing leave 0.5 m between consecutive clusters.
    assert means[0.0] - means[0.1] == pytest.approx(0.5, abs=0.25)
    assert means[0.1] - means[0.2] == pytest.approx(0.5, abs=0.25)


def test_azimuth_noise_lateral_scatter_scales_with_range():
    box = Box(center=np.array([50.0, 0.0, 0.005]), size=np.array([0.01, 0.01, 0.01]),
              yaw=0.0, velocity=np.zeros(2), class_id=0)
    sim = SimConfig(points_per_box=(10_000, 10_000), sigma_r=0.0, sigma_theta=0.01,
                    sigma_phi=0.0, clutter_points=0)
    pts = simulate_radar([box], sim, np.random.default_rng(5))
    lateral_std = pts[:, 1].std()
    assert 0.45 < lateral_std < 0.55


def test_target_orientation_channel_identity():
    rng = np.random.default_rng(6)
    boxes = sample_scene(SceneSpec(n_boxes=4, x_range=(4.0, 22.0), y_range=(-10.0, 10.0), min_gap=5.0), rng)
    t = render_target(boxes, GRID3).data
    occ, cos2, sin2 = t
    assert occ.min() >= 0.0 and occ.max() <= 1.0
    assert np.abs(cos2**2 + sin2**2 - occ**2).max() < 1e-9
    assert occ.max() == 1.0


def test_target_hand_orientations():
    base = dict(size=np.array([4.0, 2.0, 1.5]), velocity=np.zeros(2), class_id=0)
    aligned = Box(center=np.array([12.0, 0.0, 0.75]), yaw=0.0, **base)
    t = render_target([aligned], GRID3).data
    assert np.array_equal(t[1], t[0])
    assert not t[2].any()
    diagonal = Box(center=np.array([12.0, 0.0, 0.75]), yaw=np.pi / 4.0, **base)
    t = render_target([diagonal], GRID3).data
    assert np.abs(t[1]).max() < 1e-12
    assert np.allclose(t[2], t[0], atol=1e-12)
    # Interior cells are fully occupied, cells beyond one cell of the edge empty.
    ix = int((12.0 - GRID3.x_min) / GRID3.cell)
    iy = int((0.0 - GRID3.y_min) / GRID3.cell)
    assert t[0][iy, ix] == 1.0


def test_target_empty_scene_and_validation():
    assert not render_target([], GRID3).data.any()
    with pytest.raises(ShapeMismatch):
        render_target([], GRID1)


def test_feature_image_hull_and_pyramid():
    proj = default_camera(32, 32)
    box = Box(center=np.array([8.0, 0.0, 0.7]), size=np.array([3.0, 1.6, 1.4]),
              yaw=0.3, velocity=np.zeros(2), class_id=0)
    pyramid = make_feature_image([box], proj, 2, levels=3)
    assert [lvl.shape for lvl in pyramid] == [(2, 32, 32), (2, 16, 16), (2, 8, 8)]
    base = pyramid[0]
    assert base[0].any() and not base[1].any()
    assert set(np.unique(base[0])) <= {0.0, 1.0}
    # Average pooling preserves the mean at every level.
    assert base.mean() == pytest.approx(pyramid[1].mean(), abs=1e-6)
    assert base.mean() == pytest.approx(pyramid[2].mean(), abs=1e-6)
    assert not make_feature_image([], proj, 2, levels=2)[0].any()
    with pytest.raises(ValueError):
        make_feature_image([box], proj, 2, levels=3, noise_std=0.1)


def test_pyramid_file_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    pyramid = [rng.normal(size=(2, 8, 8)), rng.normal(size=(2, 4, 4))]
    path = tmp_path / "levels.pyr.bin"
    save_pyramid(path, pyramid)
    back = load_pyramid(path)
    assert len(back) == 2
    for a, b in zip(pyramid, back):
        assert np.array_equal(b, a.astype("<f4").astype(np.float64))
    (tmp_path / "trunc.bin").write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_pyramid(tmp_path / "trunc.bin")


def test_make_scene_deterministic():
    spec = SceneSpec(n_boxes=2, x_range=(5.0, 20.0), y_range=(-8.0, 8.0), min_gap=4.0)
    sim = SimConfig(points_per_box=(6, 9), clutter_points=2)
    images = ImageSpec(h0=32, w0=32, levels=2, noise_std=0.05)

    def build(seed):
        return make_scene(spec, sim, GRID3, np.random.default_rng(seed), images=images)

    a, b = build(11), build(11)
    assert np.array_equal(a.points7, b.points7)
    assert np.array_equal(a.target.data, b.target.data)
    for la, lb in zip(a.pyramid, b.pyramid):
        assert np.array_equal(la, lb)
    c = build(12)
    assert not np.array_equal(a.points7, c.points7)


def test_ground_truth_attributes_reconstruct_occupancy():
    # Noise-free points with box-aligned covariances and means pulled toward
    # the box center splat into a map that tracks target occupancy. The 0.9
    # bound is frozen as a regression threshold.
    spec = SceneSpec(n_boxes=3, x_range=(4.0, 22.0), y_range=(-10.0, 10.0), min_gap=5.0)
    sim = SimConfig(points_per_box=(40, 40), sigma_r=0.0, sigma_theta=0.0, sigma_phi=0.0, clutter_points=0)
    for seed in range(3):
        rng = np.random.default_rng(np.random.SeedSequence([77, seed]))
        boxes = sample_scene(spec, rng)
        pts = simulate_radar(boxes, sim, rng)
        target = render_target(boxes, GRID3)
        n = pts.shape[0]
        means = np.zeros((n, 2))
        covs = np.zeros((n, 2, 2))
        for i in range(n):
            box = nearest_box(pts[i, :2], boxes)
            means[i] = box.center[:2] + 0.6 * (pts[i, :2] - box.center[:2])
            r2 = rotation_z(box.yaw)[:2, :2]
            covs[i] = r2 @ np.diag([(box.size[0] / 3.0) ** 2, (box.size[1] / 3.5) ** 2]) @ r2.T
        fmap = splat_arrays(means, covs, np.full(n, 0.2), np.ones((n, 1)), GRID1)
        corr = np.corrcoef(fmap.data[0].ravel(), target.data[0].ravel())[0, 1]
        assert corr > 0.9


def mini_experiment(steps):
    return ExperimentSpec(
        name="mini",
        cells=[
            AblationCell(name="ray_centric", mode="ray_centric", offsets_enabled=False),
            AblationCell(name="ego_centric", mode="ego_centric", offsets_enabled=False),
        ],
        directions=[("ray_centric", "ego_centric")],
        scene_spec=SceneSpec(n_boxes=2, x_range=(3.0, 10.0), y_range=(-4.0, 4.0), min_gap=3.0),
        sim=SimConfig(points_per_box=(4, 6), clutter_points=1),
        encoder=EncoderConfig(feature_dim=3, point_feature_dim=6, mlp_hidden=(8,)),
        grid=BevGridSpec(0.0, 12.8, -6.4, 6.4, 0.4, 3),
        train_scenes=2,
        eval_scenes=1,
        tcfg=TrainConfig(steps=steps),
    )


def test_ablation_zero_steps_reports_initial_loss():
    report = run_ablation([mini_experiment(0)], n_seeds=2)
    assert len(report.records) == 4
    ray = report.cell_losses("mini", "ray_centric")
    ego = report.cell_losses("mini", "ego_centric")
    assert all(v > 0 for v in ray + ego)
    # Untrained cells differ only by their parameter draw.
    assert np.median(ray) == pytest.approx(np.median(ego), rel=0.25)
    assert len(report.directions) == 1


def test_ablation_report_text_roundtrip(tmp_path):
    report = run_ablation([mini_experiment(2)], n_seeds=1)
    text = report.to_text()
    assert "record=run " in text and "record=cell_summary " in text
    assert "record=stage_timing " in text and "record=direction " in text
    path = tmp_path / "report.txt"
    report.write(path)
    rows = parse_report(path.read_text())
    runs = [r for r in rows if r["record"] == "run"]
    assert len(runs) == 2
    assert all(isinstance(r["final_loss"], float) for r in runs)
    summary = [r for r in rows if r["record"] == "cell_summary" and r["cell"] == "ray_centric"][0]
    assert summary["median_final_loss"] == pytest.approx(
        np.median(report.cell_losses("mini", "ray_centric")), rel=1e-6
    )
    direction = [r for r in rows if r["record"] == "direction"][0]
    assert direction["holds"] in ("true", "false")


def test_ablation_losses_deterministic():
    a = run_ablation([mini_experiment(2)], n_seeds=1)
    b = run_ablation([mini_experiment(2)], n_seeds=1)
    for ra, rb in zip(a.records, b.records):
        assert ra.final_loss == rb.final_loss
        assert ra.holdout_loss == rb.holdout_loss
    assert a.timings and all(t.encode_ms > 0 and t.grad_step_ms > 0 for t in a.timings)


def test_default_experiments_shape():
    exps = default_experiments(steps=10)
    names = [e.name for e in exps]
    assert names == ["frame_mode", "offsets", "semantic"]
    for e in exps:
        assert e.grid.channels == e.encoder.feature_dim
        assert e.tcfg.steps == 10
        assert all(any(c.name == side for c in e.cells) for pair in e.directions for side in pair)
    semantic = exps[2]
    assert semantic.images is not None
    assert semantic.encoder.pyramid_channels
