import math

import numpy as np
import pytest

from _support import INTR, camera_plane, chair, single_object_proposals, sofa, viewing_pose
from semslam.geometry import BBox2D, Pose, project_model_bbox
from semslam.proposals import (
    DEFAULT_DATABASE,
    IOU_GATE,
    DegenerateInput,
    GroundPlaneRANSAC,
    NoGroundIntersection,
    ObjectDatabase,
    _finish,
    cuboid_proposals,
    cylinder_proposals,
    frame_proposals,
    ground_plane_estimate,
)
from semslam.scenario import camera_pose
from semslam.world_sim import Detection, Frame, LineSegment, NoiseConfig, World, simulate_frame


def _frame(detections, lines=()):
    return Frame(0, list(detections), [], list(lines), Pose.identity(), np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_noiseless_chair_recovered_exactly(seed):
    rng = np.random.default_rng(100 + seed)
    xy = rng.uniform(-2, 2, 2)
    model = chair(xy)
    props = single_object_proposals(model, viewing_pose(xy, rng), NoiseConfig.noiseless(seed))
    assert props, "no proposal survived the gate"
    assert np.linalg.norm(props[0].center - model.center) < 1e-6


def test_proposals_respect_gate_and_ground_height():
    rng = np.random.default_rng(21)
    seen = 0
    for t in range(20):
        xy = rng.uniform(-2, 2, 2)
        pose = viewing_pose(xy, rng)
        frame = simulate_frame(World([chair(xy)]), pose, INTR, NoiseConfig(seed=t), t)
        plane = camera_plane(pose)
        for props in frame_proposals(frame, plane, INTR, DEFAULT_DATABASE).values():
            for p in props:
                seen += 1
                assert p.iou_with_bbox > IOU_GATE
                assert 0.0 <= p.score <= 1.0
                h = DEFAULT_DATABASE["chair"].height
                assert abs(plane.signed_distance(p.center_cam) - 0.5 * h) < 1e-9
    assert seen > 0


def test_gate_rejects_low_overlap():
    model = chair((0.0, 0.0))
    pose = camera_pose([-3.0, 0.0, 1.0], 0.0, 0.15)
    plane = camera_plane(pose)
    cfg = plane.cam_from_ground()
    local = model.moved(cfg.inverse().apply(pose.inverse().apply(model.center)))
    box = project_model_bbox(local, cfg, INTR).bbox
    # equal-size boxes shifted by 0.6 of the width overlap with IOU (1 - 0.6) / (1 + 0.6) = 0.25
    shift = 0.6 * box.width
    low = Detection(BBox2D(box.x_min + shift, box.y_min, box.x_max + shift, box.y_max), "chair", 0.9)
    assert _finish(local, cfg, 0, low, INTR) is None
    shift = 0.4 * box.width  # IOU 0.6 / 1.4 ~ 0.43
    ok = Detection(BBox2D(box.x_min + shift, box.y_min, box.x_max + shift, box.y_max), "chair", 0.9)
    p = _finish(local, cfg, 0, ok, INTR)
    assert p is not None and abs(p.iou_with_bbox - 0.6 / 1.4) < 1e-9


def test_detection_without_lines_gives_no_proposals():
    pose = camera_pose([-3.0, 0.0, 1.0], 0.0, 0.15)
    frame = _frame([Detection(BBox2D(300, 200, 340, 320), "chair", 0.9)])
    assert cylinder_proposals(frame, 0, camera_plane(pose), INTR, DEFAULT_DATABASE) == []


def test_all_rays_missing_the_ground():
    pose = camera_pose([0.0, 0.0, 1.0], 0.0, 0.0)  # level camera: upper half rays never reach the floor
    box = BBox2D(300, 50, 340, 150)
    frame = _frame([Detection(box, "chair", 0.9)], [LineSegment(np.array([310.0, 60.0]), np.array([310.0, 140.0]))])
    with pytest.raises(NoGroundIntersection):
        cylinder_proposals(frame, 0, camera_plane(pose), INTR, DEFAULT_DATABASE)
    with pytest.raises(NoGroundIntersection):
        cuboid_proposals(_frame([Detection(box, "sofa", 0.9)]), 0, camera_plane(pose), INTR, DEFAULT_DATABASE)


def test_wrong_shape_for_label():
    frame = _frame([Detection(BBox2D(300, 200, 340, 320), "sofa", 0.9)])
    with pytest.raises(ValueError):
        cylinder_proposals(frame, 0, camera_plane(camera_pose([0, 0, 1.0], 0, 0.2)), INTR, DEFAULT_DATABASE)


@pytest.mark.parametrize("seed", range(6))
def test_noiseless_sofa_yaw_within_sampling_resolution(seed):
    rng = np.random.default_rng(300 + seed)
    xy = rng.uniform(-1, 1, 2)
    yaw = rng.uniform(-math.pi, math.pi)
    model = sofa(xy, yaw)
    props = single_object_proposals(model, viewing_pose(xy, rng, r_min=3.0, r_max=4.0), NoiseConfig.noiseless(seed))
    assert props
    d = math.remainder(props[0].yaw - model.yaw, math.pi)
    assert abs(d) <= math.pi / 36 + 1e-9


def test_single_yaw_sample_exact_center():
    pose = camera_pose([-3.5, 0.3, 1.0], 0.2, math.radians(12))
    # the ground frame's x axis follows the camera heading, so yaw 0 there is
    # world yaw 0.2
    model = sofa((0.0, 0.0), 0.2)
    props = single_object_proposals(model, pose, NoiseConfig.noiseless(0), yaw_samples=1)
    assert props
    assert np.linalg.norm(props[0].center - model.center) < 1e-6


def test_cuboid_gate_empty_when_box_cannot_fit():
    pose = camera_pose([-3.0, 0.0, 1.0], 0.0, 0.15)
    # a sliver box no grounded sofa can overlap by more than 0.3
    frame = _frame([Detection(BBox2D(318, 200, 322, 330), "sofa", 0.9)])
    assert cuboid_proposals(frame, 0, camera_plane(pose), INTR, DEFAULT_DATABASE) == []


# -- ground plane -------------------------------------------------------------


def test_plane_from_exact_points():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-2, 2, 50), rng.uniform(-2, 2, 50), np.zeros(50)])
    plane, n = ground_plane_estimate(pts)
    assert n == 50
    assert np.allclose(np.abs(plane.normal), [0, 0, 1], atol=1e-9)
    assert abs(plane.offset) < 1e-9


def test_plane_excludes_outliers():
    rng = np.random.default_rng(1)
    inl = np.column_stack([rng.uniform(-2, 2, 80), rng.uniform(1, 4, 80), np.zeros(80)]) + [0, 0, 1.2]
    out = rng.uniform(-2, 2, (20, 3)) + [0, 0, 3.0]  # well off the plane
    est = GroundPlaneRANSAC().fit(np.vstack([inl, out]))
    assert est.inlier_mask_[:80].all() and not est.inlier_mask_[80:].any()
    # normal points toward the camera centre at the origin
    assert est.plane_.offset < 0
    assert np.allclose(est.normal_, [0, 0, -1], atol=1e-9)


def test_plane_degenerate_inputs():
    with pytest.raises(DegenerateInput):
        ground_plane_estimate([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(DegenerateInput):
        ground_plane_estimate([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])


def test_ransac_estimator_params():
    est = GroundPlaneRANSAC(threshold=0.05, n_iterations=10)
    assert est.get_params() == {"threshold": 0.05, "n_iterations": 10, "random_state": 0}


def test_database_round_trip(tmp_path):
    path = tmp_path / "db.json"
    DEFAULT_DATABASE.save(path)
    again = ObjectDatabase.load(path)
    assert again == DEFAULT_DATABASE
