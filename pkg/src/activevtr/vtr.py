"""Teach-and-repeat simulation loop.

Teach drives the waypoint path under ideal guidance while building the
feature map and recording keyframes with their head angles.  Repeat reloads
that map frozen, localizes against it, follows the taught key poses with a
PD controller, and replans the head at the configured cadence.  Both phases
log per-step state so the metrics (completion rate, AP-RMSE, inlier series)
are recomputed from data rather than accumulated on the fly.

Conventions: planar robot state (x, y, heading); the robot pose is the
planar pose lifted to the camera height; a tracking loss stops translation,
holds the last head command, and retries relocalization every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .geometry import (
    DEFAULT_PTU,
    CameraIntrinsics,
    PanTilt,
    Pose3,
    PtuModel,
    camera_pose_from_robot,
    default_intrinsics,
    planar_from_pose,
    pose_from_planar,
    robot_pose_from_camera,
)
from .observation import (
    DegenerateGeometryError,
    ObservationConfig,
    TrackingMode,
    TrackingState,
    UnderconstrainedError,
    detect_scene_points,
    observe_frame,
    refine_pose,
    step_tracking,
    try_relocalize,
)
from .planners import PLANNERS, PanTiltGrid
from .world import FeatureMap, Keyframe, MapPoint, Scenario, Scene, generate_scene

__all__ = [
    "ControllerGains",
    "KinematicsConfig",
    "MappingConfig",
    "RepeatConfig",
    "SimConfig",
    "TaughtPath",
    "RunResult",
    "wrap_angle",
    "advance_unicycle",
    "guidance_states",
    "pd_control",
    "reference_search",
    "teach",
    "repeat",
    "completion_rate",
    "ap_rmse",
    "tum_lines",
    "write_tum",
]

TEACH_MAP_GAP = "TEACH_MAP_GAP"
TRACKING_LOST_TIMEOUT = "TRACKING_LOST_TIMEOUT"
DEVIATION = "DEVIATION"

# a run counts as complete once its projected progress is within this many
# meters of the taught path's end
_END_TOLERANCE = 0.02


@dataclass(frozen=True)
class ControllerGains:
    kp_lin: float = 0.8
    kd_lin: float = 0.1
    kp_head: float = 1.5
    kd_head: float = 0.1
    kp_lat: float = 2.0

    def __post_init__(self):
        for name in ("kp_lin", "kd_lin", "kp_head", "kd_head", "kp_lat"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class KinematicsConfig:
    v_max: float = 1.0
    omega_max: float = 1.5
    v_teach: float = 0.5


@dataclass(frozen=True)
class MappingConfig:
    keyframe_trans: float = 0.3
    keyframe_rot: float = math.radians(10.0)
    tracked_frac: float = 0.7
    d_range_ratio: float = 1.4


@dataclass(frozen=True)
class RepeatConfig:
    start_offset_lat: float = 0.1
    start_offset_heading: float = math.radians(5.0)
    lost_timeout_steps: int = 60
    deviation_limit: float = 1.0
    step_cap_factor: float = 4.0


@dataclass(frozen=True)
class SimConfig:
    """Everything a run needs beyond the scenario itself."""

    planner: str = "flaf"
    observation: ObservationConfig = ObservationConfig()
    mapping: MappingConfig = MappingConfig()
    gains: ControllerGains = ControllerGains()
    kinematics: KinematicsConfig = KinematicsConfig()
    repeat: RepeatConfig = RepeatConfig()
    grid: PanTiltGrid = PanTiltGrid()
    ptu: PtuModel = DEFAULT_PTU
    d_cap: float = 10.0
    slew_rate: Optional[float] = None
    workers: int = 1
    fidelity: str = "ideal"
    seed: int = 0

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ValueError(f"unknown planner {self.planner!r}; "
                             f"expected one of {sorted(PLANNERS)}")
        if self.fidelity not in ("ideal", "noisy"):
            raise ValueError("fidelity must be 'ideal' or 'noisy'")


# ---------------------------------------------------------------------------
# kinematics and guidance


def wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def advance_unicycle(x: float, y: float, heading: float,
                     v: float, omega: float, dt: float) -> Tuple[float, float, float]:
    """Exact constant-twist arc over one step."""
    if abs(omega) < 1e-9:
        return (x + v * math.cos(heading) * dt,
                y + v * math.sin(heading) * dt,
                heading)
    r = v / omega
    h1 = heading + omega * dt
    return (x + r * (math.sin(h1) - math.sin(heading)),
            y - r * (math.cos(h1) - math.cos(heading)),
            wrap_angle(h1))


def guidance_states(waypoints: np.ndarray, v: float, omega_max: float,
                    dt: float) -> np.ndarray:
    """Ideal teach trajectory: follow the polyline at speed v, rotating in
    place at corners at omega_max.  Waypoints are (N, 2) or (N, 3) rows; a
    third column supplies the initial heading.  Returns (N, 3) states."""
    wp3 = np.asarray(waypoints, dtype=float)
    if wp3.ndim != 2 or wp3.shape[0] < 2 or wp3.shape[1] not in (2, 3):
        raise ValueError("waypoints must be an (N>=2, 2 or 3) array")
    wp = wp3[:, :2]
    states = []
    if wp3.shape[1] == 3:
        heading = float(wp3[0, 2])
    else:
        heading = math.atan2(wp[1, 1] - wp[0, 1], wp[1, 0] - wp[0, 0])
    pos = wp[0].copy()
    states.append((pos[0], pos[1], heading))
    for a, b in zip(wp[:-1], wp[1:]):
        seg = b - a
        length = float(np.hypot(seg[0], seg[1]))
        if length < 1e-12:
            continue
        target = math.atan2(seg[1], seg[0])
        # in-place turn, one full-rate step at a time, short final step
        while abs(wrap_angle(target - heading)) > omega_max * dt + 1e-12:
            heading = wrap_angle(
                heading + math.copysign(omega_max * dt, wrap_angle(target - heading)))
            states.append((pos[0], pos[1], heading))
        if abs(wrap_angle(target - heading)) > 1e-12:
            heading = target
            states.append((pos[0], pos[1], heading))
        heading = target
        n_adv = int(math.ceil(length / (v * dt) - 1e-9))
        direction = seg / length
        for i in range(1, n_adv + 1):
            s = min(i * v * dt, length)
            p = a + direction * s
            states.append((p[0], p[1], heading))
        pos = b.copy()
    return np.array(states)


# ---------------------------------------------------------------------------
# polyline bookkeeping


def _cumulative_lengths(pts: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(d)])


def project_progress(poly: np.ndarray, q: np.ndarray) -> Tuple[float, float]:
    """Arc-length position and distance of the nearest point on the polyline."""
    a = poly[:-1]
    b = poly[1:]
    d = b - a
    seg_len2 = (d * d).sum(axis=1)
    t = ((q[None, :] - a) * d).sum(axis=1) / np.maximum(seg_len2, 1e-18)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * d
    dist2 = ((q[None, :] - closest) ** 2).sum(axis=1)
    i = int(np.argmin(dist2))
    cum = _cumulative_lengths(poly)
    return float(cum[i] + t[i] * math.sqrt(seg_len2[i])), float(math.sqrt(dist2[i]))


# ---------------------------------------------------------------------------
# controller


def pd_control(reference: Pose3, estimate: Pose3, prev_error, gains: ControllerGains,
               dt: float, v_max: float = 1.0, omega_max: float = 1.5):
    """PD tracking law on the pose error expressed in the estimated frame.

    Returns (v, omega, error) with error = (e_long, e_lat, e_head); pass the
    error back in as prev_error for the backward-difference derivative terms.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    ex, ey, eh = planar_from_pose(estimate)
    rx, ry, rh = planar_from_pose(reference)
    dx, dy = rx - ex, ry - ey
    ch, sh = math.cos(eh), math.sin(eh)
    e_long = dx * ch + dy * sh
    e_lat = -dx * sh + dy * ch
    e_head = wrap_angle(rh - eh)
    if prev_error is None:
        de_long = de_head = 0.0
    else:
        de_long = (e_long - prev_error[0]) / dt
        de_head = (e_head - prev_error[2]) / dt
    v = gains.kp_lin * e_long + gains.kd_lin * de_long
    v = min(max(v, 0.0), v_max)
    omega = gains.kp_head * e_head + gains.kd_head * de_head + gains.kp_lat * e_lat
    omega = min(max(omega, -omega_max), omega_max)
    return v, omega, (e_long, e_lat, e_head)


# A key pose closer than this along the robot's forward axis counts as
# reached and the search moves to the next one. Without the margin the
# controller can park abreast of a key pose that stays epsilon-ahead forever
# (v >= 0 cannot correct pure lateral error); a generous margin also keeps
# the carrot far enough ahead that kp_lin * e_long holds a sane cruise speed
# instead of decaying to a crawl at every key pose.
_REF_CAPTURE = 0.25


def reference_search(current: Pose3, taught: "TaughtPath", last_index: int) -> int:
    """Next reference among the 10 key poses around last_index: the nearest
    one ahead of the current pose, never moving backward along the list."""
    n = len(taught.key_robot_poses)
    if not (0 <= last_index < n):
        raise IndexError("last_index out of range")
    lo = max(0, last_index - 5)
    hi = min(n, last_index + 5)
    cx, cy, ch = planar_from_pose(current)
    fwd = (math.cos(ch), math.sin(ch))
    best = None
    best_d2 = math.inf
    for i in range(lo, hi):
        kx, ky, _ = planar_from_pose(taught.key_robot_poses[i])
        dx, dy = kx - cx, ky - cy
        if dx * fwd[0] + dy * fwd[1] <= _REF_CAPTURE:
            continue
        d2 = dx * dx + dy * dy
        if d2 < best_d2:
            best, best_d2 = i, d2
    if best is None:
        best = hi - 1
    return max(best, last_index)


# ---------------------------------------------------------------------------
# run records


@dataclass(frozen=True)
class TaughtPath:
    key_robot_poses: List[Pose3]
    keyframes: List[Keyframe]
    map_points: List[MapPoint]
    feature_map: FeatureMap

    def __post_init__(self):
        if len(self.key_robot_poses) != len(self.keyframes):
            raise ValueError("one key robot pose per keyframe")

    def key_positions(self) -> np.ndarray:
        return np.array([p.center[:2] for p in self.key_robot_poses])

    def content_hash(self) -> str:
        return self.feature_map.content_hash()


@dataclass(frozen=True)
class RunResult:
    phase: str                      # teach | repeat
    completed: bool
    completion_rate: float
    t: np.ndarray                   # (N,)
    xyh: np.ndarray                 # (N, 3) executed robot states
    est_xyh: np.ndarray             # (N, 3) localization output
    ptu: np.ndarray                 # (N, 2) head angles at observation time
    n_s: np.ndarray                 # (N,) tracked inliers per step
    cam_q: np.ndarray               # (N, 4) estimated camera pose (world->cam)
    cam_t: np.ndarray               # (N, 3)
    failure_cause: Optional[str]
    planner_time_mean: float

    def __post_init__(self):
        if self.completed and not (0.99 <= self.completion_rate <= 1.01):
            raise ValueError("completed run must have completion rate ~1")

    @property
    def inlier_series(self) -> np.ndarray:
        return self.n_s

    @property
    def trajectory(self) -> np.ndarray:
        """Timestamped executed states: columns (t, x, y, heading)."""
        return np.column_stack([self.t, self.xyh])


class _StepLog:
    def __init__(self):
        self.rows = []

    def add(self, t, xyh, est_xyh, ptu, n_s, cam: Pose3):
        self.rows.append((t, *xyh, *est_xyh, ptu.pan, ptu.tilt, n_s,
                          *cam.q, *cam.t))

    def arrays(self):
        if not self.rows:
            z = np.zeros
            return (z(0), z((0, 3)), z((0, 3)), z((0, 2)), z(0, dtype=int),
                    z((0, 4)), z((0, 3)))
        m = np.array(self.rows)
        return (m[:, 0], m[:, 1:4], m[:, 4:7], m[:, 7:9],
                m[:, 9].astype(int), m[:, 10:14], m[:, 14:17])


def _result(phase, completed, cr, log: _StepLog, cause, plan_times) -> RunResult:
    t, xyh, est, ptu, n_s, cam_q, cam_t = log.arrays()
    mean_plan = float(np.mean(plan_times)) if plan_times else 0.0
    return RunResult(phase=phase, completed=completed, completion_rate=cr,
                     t=t, xyh=xyh, est_xyh=est, ptu=ptu, n_s=n_s,
                     cam_q=cam_q, cam_t=cam_t, failure_cause=cause,
                     planner_time_mean=mean_plan)


def _apply_slew(current: PanTilt, target: PanTilt,
                slew: Optional[float]) -> PanTilt:
    if slew is None:
        return target
    dp = min(max(target.pan - current.pan, -slew), slew)
    dtl = min(max(target.tilt - current.tilt, -slew), slew)
    return PanTilt(current.pan + dp, current.tilt + dtl)


# ---------------------------------------------------------------------------
# teach


def teach(scenario: Scenario, cfg: SimConfig,
          intrinsics: Optional[CameraIntrinsics] = None
          ) -> Tuple[TaughtPath, RunResult]:
    """Drive the waypoint path once, building the map and the keyframe chain.

    The operator input is ideal (the true trajectory follows the waypoints
    exactly), so a teach failure is purely a perception failure: the tracker
    stayed under theta_track for the timeout, leaving a gap in the map.
    """
    intr = intrinsics or default_intrinsics()
    scene = generate_scene(scenario)
    rng = np.random.default_rng([scenario.rng_seed, cfg.seed, 0])
    obs_cfg = cfg.observation
    fmap = FeatureMap(scene, d_range_ratio=cfg.mapping.d_range_ratio)
    plan_fn = PLANNERS[cfg.planner]

    waypoints = np.asarray(scenario.taught_path, dtype=float)
    states = guidance_states(waypoints, cfg.kinematics.v_teach,
                             cfg.kinematics.omega_max, scenario.dt)
    path_xy = waypoints[:, :2]
    path_len = _cumulative_lengths(path_xy)[-1]

    ptu = PanTilt(0.0, 0.0)
    prev_obs_ids = np.zeros(0, dtype=int)
    last_kf: Optional[Keyframe] = None
    track = TrackingState(TrackingMode.TRACKING, 0, 0)
    bootstrapped = False
    log = _StepLog()
    plan_times: List[float] = []
    cause = None

    for k in range(states.shape[0]):
        t = k * scenario.dt
        x, y, heading = states[k]
        robot = pose_from_planar(x, y, heading, height=scenario.camera_height)
        cam = camera_pose_from_robot(robot, ptu, cfg.ptu)

        seed_ids = prev_obs_ids
        if seed_ids.size == 0 and last_kf is not None:
            # nothing matched last frame: fall back to the reference keyframe
            kf_ids = last_kf.observed_points
            seed_ids = kf_ids[np.isin(kf_ids, fmap.point_ids)]
        local_map = fmap.local_map(seed_ids)
        obs = observe_frame(cam, local_map, scene, intr, obs_cfg, rng=rng)
        n_s = len(obs)
        prev_obs_ids = obs.ids

        if bootstrapped:
            bar = obs_cfg.theta_reloc if track.mode is TrackingMode.LOST else None
            track = step_tracking(track, n_s, obs_cfg.theta_track, bar)
        elif n_s >= obs_cfg.theta_track:
            bootstrapped = True
            track = TrackingState(TrackingMode.TRACKING, n_s, 0)
        lost = bootstrapped and track.mode is TrackingMode.LOST

        log.add(t, (x, y, heading), (x, y, heading), ptu, n_s, cam)
        if lost and track.steps_lost >= cfg.repeat.lost_timeout_steps:
            cause = TEACH_MAP_GAP
            break

        if not lost:
            insert = last_kf is None
            detected = None
            if last_kf is not None:
                lx, ly, lh = planar_from_pose(last_kf.robot_pose)
                moved = math.hypot(x - lx, y - ly) > cfg.mapping.keyframe_trans
                turned = abs(wrap_angle(heading - lh)) > cfg.mapping.keyframe_rot
                insert = moved or turned
                if not insert:
                    detected = detect_scene_points(scene, cam, intr, obs_cfg,
                                                   rng=rng)
                    ref = last_kf.observed_points
                    if ref.size:
                        frac = np.intersect1d(detected, ref).size / ref.size
                        insert = frac < cfg.mapping.tracked_frac
            if insert:
                if detected is None:
                    detected = detect_scene_points(scene, cam, intr, obs_cfg,
                                                   rng=rng)
                fmap.insert_keyframe(cam, ptu, robot, t, detected)
                last_kf = fmap.keyframes[-1]

        if not lost and k % scenario.plan_every_steps == 0:
            res = plan_fn(robot, local_map, cfg.grid, scene=scene,
                          intrinsics=intr, model=cfg.ptu, current=ptu,
                          workers=cfg.workers, d_cap=cfg.d_cap)
            plan_times.append(res.elapsed)
            ptu = _apply_slew(ptu, res.best, cfg.slew_rate)

    taught = TaughtPath(
        key_robot_poses=[kf.robot_pose for kf in fmap.keyframes],
        keyframes=list(fmap.keyframes),
        map_points=[fmap.point(i) for i in fmap.point_ids],
        feature_map=fmap)

    if cause is None and not bootstrapped:
        # drove the whole path but the tracker never latched onto the map
        cause = TEACH_MAP_GAP
    if cause is None:
        result = _result("teach", True, 1.0, log, None, plan_times)
    else:
        s, _ = project_progress(path_xy, np.array([x, y]))
        cr = min(1.0, s / path_len) if path_len > 0 else 0.0
        if not bootstrapped:
            cr = 0.0
        result = _result("teach", False, cr, log, cause, plan_times)
    return taught, result


# ---------------------------------------------------------------------------
# repeat


def repeat(taught: TaughtPath, scenario: Scenario, cfg: SimConfig,
           intrinsics: Optional[CameraIntrinsics] = None) -> RunResult:
    """Follow the taught key poses against the frozen map.

    Localization runs at the configured fidelity: 'ideal' trusts the true
    pose whenever tracking holds, 'noisy' solves for the camera pose from
    pixel observations seeded by the motion-propagated previous estimate.
    """
    if len(taught.key_robot_poses) < 2:
        raise ValueError("cannot repeat a taught path with fewer than 2 key poses")
    intr = intrinsics or default_intrinsics()
    scene = generate_scene(scenario)
    rng = np.random.default_rng([scenario.rng_seed, cfg.seed, 1])
    obs_cfg = cfg.observation
    fmap = taught.feature_map
    plan_fn = PLANNERS[cfg.planner]
    noisy = cfg.fidelity == "noisy"
    sigma = obs_cfg.pixel_noise_sigma if noisy else 0.0

    key_xy = taught.key_positions()
    path_len = _cumulative_lengths(key_xy)[-1]
    if path_len <= 0.0:
        raise ValueError("taught key poses span zero length")
    # relative cap keeps the completed-run rate invariant on short toy paths
    end_tol = min(_END_TOLERANCE, 0.01 * path_len)

    # start near the taught start with the configured offset
    x0, y0, h0 = planar_from_pose(taught.key_robot_poses[0])
    x = x0 - math.sin(h0) * cfg.repeat.start_offset_lat
    y = y0 + math.cos(h0) * cfg.repeat.start_offset_lat
    heading = wrap_angle(h0 + cfg.repeat.start_offset_heading)
    est = (x0, y0, h0)  # the robot believes it starts on the path

    dt = scenario.dt
    step_cap = int(cfg.repeat.step_cap_factor
                   * (path_len / max(cfg.kinematics.v_teach, 1e-9)) / dt) + 400

    ptu = PanTilt(0.0, 0.0)
    track = TrackingState(TrackingMode.TRACKING, 0, 0)
    last_ref = 0
    prev_err = None
    v = omega = 0.0
    log = _StepLog()
    plan_times: List[float] = []
    cause = None
    completed = False
    progress = 0.0
    prev_obs_ids = np.zeros(0, dtype=int)

    def window_points(center_kf: int) -> np.ndarray:
        lo = max(0, center_kf - 1)
        ids = np.concatenate([taught.keyframes[i].observed_points
                              for i in range(lo, min(len(taught.keyframes),
                                                     center_kf + 2))])
        ids = np.unique(ids)
        return ids[np.isin(ids, fmap.point_ids)]

    for k in range(step_cap):
        t = k * dt
        robot_true = pose_from_planar(x, y, heading,
                                      height=scenario.camera_height)
        cam_true = camera_pose_from_robot(robot_true, ptu, cfg.ptu)

        # track against whatever matched last frame; when that runs dry,
        # reseed from the taught keyframes nearest the current estimate
        seed_ids = prev_obs_ids
        if seed_ids.size < obs_cfg.theta_track:
            d2 = ((key_xy - np.array(est[:2])[None, :]) ** 2).sum(axis=1)
            seed_ids = np.union1d(seed_ids, window_points(int(np.argmin(d2))))
        local_map = fmap.local_map(seed_ids)

        obs = observe_frame(cam_true, local_map, scene, intr, obs_cfg,
                            rng=rng, sigma=sigma)
        n_s = len(obs)
        prev_obs_ids = obs.ids

        if track.mode is TrackingMode.TRACKING:
            track = step_tracking(track, n_s, obs_cfg.theta_track)

        # the logged camera pose is always recomposed from the planar state
        # estimate so the (camera, robot) pair stays exactly consistent
        def cam_of(planar_est):
            return camera_pose_from_robot(
                pose_from_planar(*planar_est, height=scenario.camera_height),
                ptu, cfg.ptu)

        if track.mode is TrackingMode.LOST:
            # freeze in place, keep the last head command, retry reloc
            reloc = try_relocalize(cam_true, fmap, scene, intr, obs_cfg,
                                   sigma=sigma, rng=rng)
            if reloc is not None:
                est = planar_from_pose(robot_pose_from_camera(reloc, ptu, cfg.ptu))
                log.add(t, (x, y, heading), est, ptu, n_s, cam_of(est))
                track = TrackingState(TrackingMode.TRACKING, n_s, 0)
                prev_err = None
                v = omega = 0.0
                continue
            log.add(t, (x, y, heading), est, ptu, n_s, cam_of(est))
            track = TrackingState(TrackingMode.LOST, n_s, track.steps_lost + 1)
            if track.steps_lost >= cfg.repeat.lost_timeout_steps:
                cause = TRACKING_LOST_TIMEOUT
                break
            continue

        # localize
        if noisy:
            ex, ey, eh = advance_unicycle(*est, v, omega, dt)
            prior = camera_pose_from_robot(
                pose_from_planar(ex, ey, eh, height=scenario.camera_height),
                ptu, cfg.ptu)
            try:
                est_cam, _ = refine_pose(prior, obs, local_map, intr)
                est = planar_from_pose(robot_pose_from_camera(est_cam, ptu, cfg.ptu))
            except (UnderconstrainedError, DegenerateGeometryError):
                track = TrackingState(TrackingMode.LOST, n_s, 1)
                log.add(t, (x, y, heading), est, ptu, n_s, cam_of(est))
                continue
        else:
            est = (x, y, heading)

        log.add(t, (x, y, heading), est, ptu, n_s, cam_of(est))

        est_pose = pose_from_planar(*est, height=scenario.camera_height)
        last_ref = reference_search(est_pose, taught, last_ref)
        v, omega, prev_err = pd_control(
            taught.key_robot_poses[last_ref], est_pose, prev_err, cfg.gains,
            dt, v_max=cfg.kinematics.v_max, omega_max=cfg.kinematics.omega_max)

        if k % scenario.plan_every_steps == 0:
            res = plan_fn(est_pose, local_map, cfg.grid, scene=scene,
                          intrinsics=intr, model=cfg.ptu, current=ptu,
                          workers=cfg.workers, d_cap=cfg.d_cap)
            plan_times.append(res.elapsed)
            ptu = _apply_slew(ptu, res.best, cfg.slew_rate)

        x, y, heading = advance_unicycle(x, y, heading, v, omega, dt)

        s, lateral = project_progress(key_xy, np.array([x, y]))
        progress = max(progress, s)
        if progress >= path_len - end_tol:
            completed = True
            break
        if lateral > cfg.repeat.deviation_limit:
            cause = DEVIATION
            break

    cr = min(1.0, progress / path_len)
    return _result("repeat", completed, cr, log, cause, plan_times)


# ---------------------------------------------------------------------------
# metrics


def completion_rate(trajectory_xy: np.ndarray, taught_xy: np.ndarray) -> float:
    """Fraction of the taught polyline's arc length reached by the run's
    furthest nearest-point projection."""
    traj = np.asarray(trajectory_xy, dtype=float)
    taught = np.asarray(taught_xy, dtype=float)
    if traj.ndim != 2 or traj.shape[0] < 1 or taught.shape[0] < 2:
        raise ValueError("need at least one pose and a 2-point taught path")
    total = _cumulative_lengths(taught)[-1]
    if total <= 0.0:
        raise ValueError("taught path has zero length")
    best = 0.0
    for q in traj[:, :2]:
        s, _ = project_progress(taught, q)
        best = max(best, s)
    return min(1.0, best / total)


def ap_rmse(repeat_traj: np.ndarray, taught_traj: np.ndarray) -> float:
    """Position RMSE after normalizing both time axes to [0, 1].

    Expects (N, >=3) arrays with columns (t, x, y, ...).  Each repeat pose is
    paired with the taught pose nearest in normalized time; no alignment is
    applied since both live in the shared world frame.
    """
    rep = np.asarray(repeat_traj, dtype=float)
    tau = np.asarray(taught_traj, dtype=float)
    if rep.shape[0] < 2 or tau.shape[0] < 2:
        raise ValueError("trajectories need at least two poses")

    def normalize(ts):
        span = ts[-1] - ts[0]
        if span <= 0.0:
            raise ValueError("degenerate timestamps")
        return (ts - ts[0]) / span

    rt = normalize(rep[:, 0])
    tt = normalize(tau[:, 0])
    j = np.searchsorted(tt, rt)
    j = np.clip(j, 1, len(tt) - 1)
    pick_left = (rt - tt[j - 1]) <= (tt[j] - rt)
    j = np.where(pick_left, j - 1, j)
    diff = rep[:, 1:3] - tau[j, 1:3]
    return float(np.sqrt(np.mean((diff ** 2).sum(axis=1))))


def tum_lines(trajectory: np.ndarray, height: float = 0.4) -> List[str]:
    """TUM-format lines (timestamp tx ty tz qx qy qz qw) for a planar
    trajectory given as (N, >=4) rows of (t, x, y, heading)."""
    lines = []
    for row in np.asarray(trajectory, dtype=float):
        t, x, y, heading = row[:4]
        pose = pose_from_planar(x, y, heading, height=height)
        # body-to-world: position is the pose center, rotation the transpose
        c = pose.center
        w, qx, qy, qz = _quat_conjugate(pose.q)
        lines.append(f"{t:.6f} {c[0]:.9f} {c[1]:.9f} {c[2]:.9f} "
                     f"{qx:.9f} {qy:.9f} {qz:.9f} {w:.9f}")
    return lines


def _quat_conjugate(q):
    return (q[0], -q[1], -q[2], -q[3])


def write_tum(path, trajectory: np.ndarray, height: float = 0.4) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(tum_lines(trajectory, height)))
        fh.write("\n")
