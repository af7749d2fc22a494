"""Perception-stack tests: gates, noise model, tracking FSM, Gauss-Newton."""

import math

import numpy as np
import pytest

from activevtr.geometry import (
    Pose3,
    apply_increment,
    default_intrinsics,
    pose_from_planar,
    project,
)
from activevtr.observation import (
    DegenerateGeometryError,
    FrameObservations,
    Observation,
    ObservationConfig,
    TrackingMode,
    TrackingState,
    UnderconstrainedError,
    _residuals_and_jacobian,
    detect_scene_points,
    identifiable,
    identify_probabilistic,
    inlier_count,
    observe_frame,
    refine_pose,
    reprojection_error,
    step_tracking,
    try_relocalize,
)
from activevtr.world import FeatureMap, LocalMap, MapPoint, Scene, Wall

INTR = default_intrinsics()


def _pose_at(center, look=np.array([0.0, 0.0, 1.0])):
    """World->camera pose with +z along ``look`` (must not be vertical)."""
    z = np.asarray(look, float)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, -up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.column_stack([x, y, z])
    R = R_wc.T
    return Pose3.from_matrix(R, -R @ np.asarray(center, float))


def _mp(pid, position, n_p, d1=0.5, d2=10.0):
    n = np.asarray(n_p, float)
    return MapPoint(id=pid, position=np.asarray(position, float),
                    mean_view_dir=n / np.linalg.norm(n), d1=d1, d2=d2,
                    observing_keyframes=(0, 1), scene_point_id=pid)


def _local_map(points, scene=None):
    ids = np.array([p.id for p in points], dtype=np.int64)
    order = np.argsort(ids)
    pts = [points[i] for i in order]
    wall_ids = (scene.wall_ids[ids[order]] if scene is not None
                else np.full(len(pts), -1, dtype=np.int64))
    return LocalMap(keyframe_ids=(0,), ids=ids[order],
                    positions=np.array([p.position for p in pts]),
                    view_dirs=np.array([p.mean_view_dir for p in pts]),
                    d1=np.array([p.d1 for p in pts]),
                    d2=np.array([p.d2 for p in pts]),
                    wall_ids=wall_ids)


# ---------------------------------------------------------------------------
# identifiable gates


def test_identifiable_nominal():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    p = _mp(0, [3.0, 0, 1.0], n_p=[-1, 0, 0], d1=1.0, d2=6.0)
    assert identifiable(p, cam, INTR)


def test_identifiable_alpha2_cap():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    for deg, expect in ((59.0, True), (61.0, False)):
        a = math.radians(deg)
        n = [-math.cos(a), math.sin(a), 0.0]  # n_p tilted off the ray to the camera
        p = _mp(0, [3.0, 0, 1.0], n_p=n, d1=1.0, d2=6.0)
        assert identifiable(p, cam, INTR) is expect, deg


def test_identifiable_distance_range():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    good = _mp(0, [3.0, 0, 1.0], n_p=[-1, 0, 0], d1=2.9, d2=3.1)
    assert identifiable(good, cam, INTR)
    far = _mp(0, [3.0, 0, 1.0], n_p=[-1, 0, 0], d1=1.0, d2=2.999)
    assert not identifiable(far, cam, INTR)
    near = _mp(0, [3.0, 0, 1.0], n_p=[-1, 0, 0], d1=3.001, d2=6.0)
    assert not identifiable(near, cam, INTR)


def test_identifiable_image_and_depth_gates():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    behind = _mp(0, [-2.0, 0, 1.0], n_p=[1, 0, 0])
    assert not identifiable(behind, cam, INTR)
    # default HFOV is 69 deg, so a point 50 deg off-axis is outside the image
    off = _mp(0, [2.0, 2.0 * math.tan(math.radians(50)), 1.0], n_p=[-1, 0, 0])
    assert not identifiable(off, cam, INTR)


def test_identifiable_occlusion_via_scene():
    walls = (Wall(a=(4, 2), b=(4, -2)), Wall(a=(2, -1), b=(2, 1)))
    positions = np.array([[4.0, 0.0, 1.0]])
    scene = Scene(walls, positions, np.array([[-1.0, 0, 0]]), np.array([0]))
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    p = _mp(0, [4.0, 0, 1.0], n_p=[-1, 0, 0], d1=1.0, d2=8.0)
    assert identifiable(p, cam, INTR)             # free-space check passes
    assert not identifiable(p, cam, INTR, scene)  # the occluder blocks it


# ---------------------------------------------------------------------------
# probabilistic identification


def test_identify_probabilistic_extremes():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    rng = np.random.default_rng(0)
    head_on = _mp(0, [3.0, 0, 1.0], n_p=[-1, 0, 0])
    assert all(identify_probabilistic(head_on, cam, rng) for _ in range(200))
    side_on = _mp(0, [3.0, 0, 1.0], n_p=[0, 1, 0])  # alpha2 = 90 deg
    assert not any(identify_probabilistic(side_on, cam, rng) for _ in range(200))


@pytest.mark.parametrize("deg", [30.0, 45.0, 60.0])
def test_identify_probabilistic_frequency(deg):
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    a = math.radians(deg)
    p = _mp(0, [3.0, 0, 1.0], n_p=[-math.cos(a), math.sin(a), 0.0])
    rng = np.random.default_rng(int(deg))
    n = 100_000
    hits = sum(identify_probabilistic(p, cam, rng) for _ in range(n))
    assert abs(hits / n - math.cos(a)) < 0.01


# ---------------------------------------------------------------------------
# frame observation


def _open_scene(points):
    # single faraway wall nobody crosses; points live in free space for tests
    walls = (Wall(a=(-100, -100), b=(100, -100)),)
    pos = np.array([p.position for p in points])
    nrm = np.array([p.mean_view_dir for p in points])
    return Scene(walls, pos, nrm, np.arange(len(points)) * 0 - 1)


def test_observe_frame_matches_identifiable_per_point():
    rng = np.random.default_rng(5)
    cfg = ObservationConfig()
    for _ in range(50):
        cam = _pose_at([0, 0, 1.0], look=[1.0, rng.uniform(-0.3, 0.3), 0])
        points = []
        for i in range(20):
            pos = np.array([rng.uniform(0.5, 6.0), rng.uniform(-3, 3), rng.uniform(0, 2)])
            n = rng.standard_normal(3)
            d = rng.uniform(0.5, 5.0)
            points.append(_mp(i, pos, n, d1=d, d2=d * rng.uniform(1.2, 4.0)))
        scene = _open_scene(points)
        lm = _local_map(points, scene=None)
        # align scene row order with point ids for the visibility call
        obs = observe_frame(cam, lm, scene, INTR, cfg)
        expect = sorted(p.id for p in points if identifiable(p, cam, INTR, scene))
        assert obs.ids.tolist() == expect


def test_observe_frame_exact_pixels_when_noiseless():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    points = [_mp(i, [3.0, 0.3 * i - 0.3, 1.0], n_p=[-1, 0, 0]) for i in range(3)]
    lm = _local_map(points)
    obs = observe_frame(cam, lm, _open_scene(points), INTR, ObservationConfig())
    assert len(obs) == 3 and obs.weight == 1.0
    for o in obs:
        expect = project(INTR, cam, points[o.point_id].position)
        assert np.allclose(o.pixel, expect, atol=1e-12)
        assert np.allclose(o.omega, np.eye(2))


def test_observe_frame_noise_statistics_and_bounds():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    points = [_mp(i, [3.0, 0.01 * i, 1.0], n_p=[-1, 0, 0]) for i in range(200)]
    lm = _local_map(points)
    scene = _open_scene(points)
    sigma = 0.5
    obs = observe_frame(cam, lm, scene, INTR, ObservationConfig(),
                        rng=np.random.default_rng(9), sigma=sigma)
    clean = observe_frame(cam, lm, scene, INTR, ObservationConfig())
    dev = obs.pixels - clean.pixels
    assert abs(obs.weight - 1.0 / sigma**2) < 1e-12
    assert 0.3 < dev.std() < 0.7
    assert np.all(obs.pixels[:, 0] >= 0) and np.all(obs.pixels[:, 0] <= INTR.width)
    assert np.all(obs.pixels[:, 1] >= 0) and np.all(obs.pixels[:, 1] <= INTR.height)


def test_observe_frame_stochastic_reproducible():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    a = math.radians(55.0)
    # nearly coincident points keep alpha2 at 55 deg for every candidate
    points = [_mp(i, [3.0, 0.0, 1.0 + 0.001 * i], n_p=[-math.cos(a), math.sin(a), 0])
              for i in range(300)]
    lm = _local_map(points)
    scene = _open_scene(points)
    cfg = ObservationConfig(identifiability_mode="stochastic")
    a_ids = observe_frame(cam, lm, scene, INTR, cfg, rng=np.random.default_rng(3)).ids
    b_ids = observe_frame(cam, lm, scene, INTR, cfg, rng=np.random.default_rng(3)).ids
    assert np.array_equal(a_ids, b_ids)
    frac = len(a_ids) / len(points)
    assert abs(frac - math.cos(a)) < 0.1  # loose: one seed, 300 draws
    with pytest.raises(ValueError):
        observe_frame(cam, lm, scene, INTR, cfg)  # rng required


def test_empty_map_gives_empty_frame():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    lm = _local_map([])
    points = [_mp(0, [3.0, 0, 1.0], n_p=[-1, 0, 0])]
    assert len(observe_frame(cam, lm, _open_scene(points), INTR, ObservationConfig())) == 0


def test_inlier_count_contrived_gates():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    good = [_mp(i, [3.0, 0.2 * i - 0.5, 1.0], n_p=[-1, 0, 0]) for i in range(6)]
    bad = [
        _mp(10, [-2.0, 0, 1.0], n_p=[1, 0, 0]),                       # behind
        _mp(11, [2.0, 2.5, 1.0], n_p=[-1, 0, 0]),                     # out of image
        _mp(12, [3.0, 0.5, 1.0], n_p=[-1, 0, 0], d1=4.0, d2=8.0),     # too near
        _mp(13, [3.0, -0.5, 1.0], n_p=[0, 1, 0]),                     # alpha2 too big
    ]
    points = good + bad
    lm = _local_map(points)
    assert inlier_count(cam, lm, _open_scene(points), INTR) == 6
    # order invariance
    lm2 = _local_map(points[::-1])
    assert inlier_count(cam, lm2, _open_scene(points), INTR) == 6


# ---------------------------------------------------------------------------
# reprojection error and refinement


def test_reprojection_error_zero_and_offset():
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    p = _mp(0, [3.0, 0.2, 0.8], n_p=[-1, 0, 0])
    pix = project(INTR, cam, p.position)
    assert np.allclose(reprojection_error(Observation(0, pix, 1.0), p, cam, INTR),
                       [0, 0], atol=1e-12)
    off = Observation(0, pix + np.array([1.0, -2.0]), 1.0)
    assert np.allclose(reprojection_error(off, p, cam, INTR), [1.0, -2.0], atol=1e-12)


def _synthetic_problem(rng, n=30, sigma=0.0):
    """Ground-truth pose plus n points in its frustum with exact pixels."""
    truth = _pose_at(rng.uniform(-1, 1, 3) + [0, 0, 1.5],
                     look=[1.0, rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3)])
    zc = rng.uniform(1.0, 6.0, n)
    xc = zc * np.tan(INTR.hfov / 2 * 0.85) * rng.uniform(-1, 1, n)
    yc = zc * np.tan(INTR.vfov / 2 * 0.85) * rng.uniform(-1, 1, n)
    pc = np.column_stack([xc, yc, zc])
    pw = (pc - truth.t) @ truth.R
    points = {i: _mp(i, pw[i], n_p=[-1, 0, 0]) for i in range(n)}
    pixels = np.array([project(INTR, truth, pw[i]) for i in range(n)])
    if sigma > 0:
        pixels = pixels + sigma * rng.standard_normal(pixels.shape)
    obs = FrameObservations(np.arange(n), pixels, 1.0 if sigma == 0 else 1.0 / sigma**2)
    return truth, points, obs


def test_refine_pose_fixed_point_at_truth():
    rng = np.random.default_rng(21)
    truth, points, obs = _synthetic_problem(rng)
    pose, cost = refine_pose(truth, obs, points, INTR)
    assert cost < 1e-18
    assert np.allclose(pose.R, truth.R, atol=1e-12)
    assert np.allclose(pose.t, truth.t, atol=1e-12)


def test_refine_pose_recovers_from_perturbation():
    rng = np.random.default_rng(22)
    for _ in range(10):
        truth, points, obs = _synthetic_problem(rng)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        dt = rng.standard_normal(3)
        dt *= 0.1 / np.linalg.norm(dt)
        init = apply_increment(truth, np.concatenate([dt, math.radians(5.0) * axis]))
        pose, cost = refine_pose(init, obs, points, INTR)
        assert cost < 1e-12
        rot_err = math.acos(min(1.0, (np.trace(pose.R @ truth.R.T) - 1) / 2))
        assert rot_err < 1e-6
        assert np.linalg.norm(pose.t - truth.t) < 1e-6


def test_refine_pose_cost_trace_non_increasing():
    rng = np.random.default_rng(23)
    truth, points, obs = _synthetic_problem(rng, sigma=1.0)
    init = apply_increment(truth, np.array([0.05, -0.08, 0.02, 0.04, -0.03, 0.05]))
    trace = []
    refine_pose(init, obs, points, INTR, cost_trace=trace)
    assert len(trace) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_refine_pose_underconstrained():
    rng = np.random.default_rng(24)
    truth, points, obs = _synthetic_problem(rng, n=5)
    with pytest.raises(UnderconstrainedError):
        refine_pose(truth, obs, points, INTR)


def test_refine_pose_degenerate_geometry():
    # six observations of the same physical point constrain nothing
    cam = _pose_at([0, 0, 1.0], look=[1, 0, 0])
    p = np.array([3.0, 0.0, 1.0])
    points = {i: _mp(i, p, n_p=[-1, 0, 0]) for i in range(6)}
    pix = project(INTR, cam, p)
    obs = FrameObservations(np.arange(6), np.tile(pix, (6, 1)), 1.0)
    with pytest.raises(DegenerateGeometryError):
        refine_pose(cam, obs, points, INTR)


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(25)
    h = 1e-6
    for _ in range(20):
        truth, points, obs = _synthetic_problem(rng, n=8)
        positions = np.array([points[i].position for i in range(8)])
        res, good, jac = _residuals_and_jacobian(truth, positions, obs.pixels, INTR)
        assert good.all()
        for j in range(6):
            step = np.zeros(6)
            step[j] = h
            rp, _, _ = _residuals_and_jacobian(apply_increment(truth, step),
                                               positions, obs.pixels, INTR,
                                               want_jacobian=False)
            rm, _, _ = _residuals_and_jacobian(apply_increment(truth, -step),
                                               positions, obs.pixels, INTR,
                                               want_jacobian=False)
            fd = (rp - rm) / (2 * h)
            scale = np.maximum(np.abs(jac[:, :, j]), 1.0)
            assert np.max(np.abs(fd - jac[:, :, j]) / scale) < 1e-5


# ---------------------------------------------------------------------------
# tracking state machine


def test_step_tracking_boundary_inclusive():
    s = step_tracking(TrackingState(), 20, theta_track=20)
    assert s.mode is TrackingMode.TRACKING and s.steps_lost == 0


def test_step_tracking_loss_increments():
    s = step_tracking(TrackingState(), 19, theta_track=20)
    assert s.mode is TrackingMode.LOST and s.steps_lost == 1
    s = step_tracking(s, 3, theta_track=20)
    assert s.steps_lost == 2


def test_step_tracking_reloc_gate():
    lost = step_tracking(TrackingState(), 0, theta_track=20)
    # theta_track alone is not enough to recover once the reloc gate is on
    still = step_tracking(lost, 25, theta_track=20, theta_reloc=30)
    assert still.mode is TrackingMode.LOST and still.steps_lost == 2
    back = step_tracking(still, 30, theta_track=20, theta_reloc=30)
    assert back.mode is TrackingMode.TRACKING and back.steps_lost == 0


def test_tracking_state_invariant():
    with pytest.raises(ValueError):
        TrackingState(TrackingMode.TRACKING, 25, steps_lost=3)


# ---------------------------------------------------------------------------
# relocalization


def _taught_wall_map(n_points=40, ratio=2.0):
    wall = Wall(a=(4, -3), b=(4, 3))  # normal (-1, 0): faces the origin side
    y = np.linspace(-2.0, 2.0, n_points)
    z = 1.0 + 0.5 * np.sin(np.arange(n_points) * 2.1)  # break collinearity
    positions = np.column_stack([np.full(n_points, 4.0), y, z])
    normals = np.tile([-1.0, 0.0, 0.0], (n_points, 1))
    scene = Scene((wall,), positions, normals, np.zeros(n_points, dtype=np.int64))
    fmap = FeatureMap(scene, d_range_ratio=ratio)
    ids = np.arange(n_points)
    pose0 = _pose_at([0.0, -0.2, 1.0], look=[1, 0, 0])
    pose1 = _pose_at([0.0, 0.2, 1.0], look=[1, 0, 0])
    from activevtr.geometry import PanTilt
    fmap.insert_keyframe(pose0, PanTilt(), pose0, 0.0, ids)
    fmap.insert_keyframe(pose1, PanTilt(), pose1, 1.0, ids)
    return scene, fmap


def test_try_relocalize_success_at_keyframe():
    scene, fmap = _taught_wall_map()
    cfg = ObservationConfig(theta_reloc=30)
    true_pose = _pose_at([0.0, -0.2, 1.0], look=[1, 0, 0])
    out = try_relocalize(true_pose, fmap, scene, INTR, cfg)
    assert out is not None
    assert np.allclose(out.t, true_pose.t)


def test_try_relocalize_fails_facing_away():
    scene, fmap = _taught_wall_map()
    cfg = ObservationConfig(theta_reloc=30)
    true_pose = _pose_at([0.0, 0.0, 1.0], look=[-1, 0, 0])
    assert try_relocalize(true_pose, fmap, scene, INTR, cfg) is None


def test_try_relocalize_borderline_count():
    scene, fmap = _taught_wall_map(n_points=30)
    true_pose = _pose_at([0.0, -0.2, 1.0], look=[1, 0, 0])
    assert try_relocalize(true_pose, fmap, scene, INTR,
                          ObservationConfig(theta_reloc=30)) is not None
    assert try_relocalize(true_pose, fmap, scene, INTR,
                          ObservationConfig(theta_reloc=31)) is None


def test_try_relocalize_noisy_returns_refined_pose():
    scene, fmap = _taught_wall_map()
    cfg = ObservationConfig(theta_reloc=30)
    true_pose = _pose_at([0.1, -0.1, 1.0], look=[1, 0, 0])
    out = try_relocalize(true_pose, fmap, scene, INTR, cfg, sigma=0.5,
                         rng=np.random.default_rng(2))
    assert out is not None
    assert np.linalg.norm(out.t - true_pose.t) < 0.05  # near, not exactly at, truth


def test_detect_scene_points_range_and_normals():
    scene, _ = _taught_wall_map()
    cfg = ObservationConfig(detection_range=3.0)
    cam = _pose_at([0.0, 0.0, 1.0], look=[1, 0, 0])
    assert detect_scene_points(scene, cam, INTR, cfg).size == 0  # wall is 4 m away
    near = _pose_at([2.0, 0.0, 1.0], look=[1, 0, 0])
    ids = detect_scene_points(scene, near, INTR, cfg)
    assert ids.size > 0
    # all detected points are within range and in front
    d = np.linalg.norm(scene.positions[ids] - near.center, axis=1)
    assert np.all(d <= 3.0)
