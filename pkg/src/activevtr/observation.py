"""Simulated perception: identifiability gates, frame observation, the
tracking state machine, and Gauss-Newton pose refinement.

A map point is identified by a view when (a) it projects into the image with
positive depth, (b) it is visible (front-facing and unoccluded), (c) its
distance lies in the invariant range [d1, d2], and (d) the angle between its
reference direction and the ray toward the camera is at most alpha2_max.
In stochastic mode gate (d) is replaced by a Bernoulli draw with success
probability cos(alpha2), the standard identifiability proxy for appearance
change under viewpoint rotation.

All randomness comes in through explicit generators so a frame is a pure
function of (pose, map, rng state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, Pose3, apply_increment
from .world import LocalMap, MapPoint, Scene

__all__ = [
    "UnderconstrainedError",
    "DegenerateGeometryError",
    "ObservationConfig",
    "Observation",
    "FrameObservations",
    "TrackingMode",
    "TrackingState",
    "identifiable",
    "identify_probabilistic",
    "observe_frame",
    "detect_scene_points",
    "inlier_count",
    "reprojection_error",
    "refine_pose",
    "step_tracking",
    "try_relocalize",
]


class UnderconstrainedError(ValueError):
    """Too few observations to constrain a 6-DoF pose."""


class DegenerateGeometryError(ValueError):
    """Normal equations numerically singular (e.g. collinear points)."""


@dataclass(frozen=True)
class ObservationConfig:
    theta_track: int = 20
    theta_reloc: int = 30
    pixel_noise_sigma: float = 0.5
    identifiability_mode: str = "deterministic"  # or "stochastic"
    alpha2_max: float = math.radians(60.0)
    detection_range: float = 4.0  # sensing cap for fresh scene points (teach)

    def __post_init__(self):
        if self.identifiability_mode not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown identifiability_mode {self.identifiability_mode!r}")
        if self.theta_reloc < self.theta_track:
            raise ValueError("theta_reloc below theta_track makes relocalization trivial")


@dataclass(frozen=True)
class Observation:
    point_id: int
    pixel: np.ndarray
    weight: float  # scalar information; Omega = weight * I

    @property
    def omega(self) -> np.ndarray:
        return self.weight * np.eye(2)


class FrameObservations:
    """One frame's identified points, stored columnar.

    Iterating yields ``Observation`` records; ``ids`` are sorted ascending.
    """

    __slots__ = ("ids", "pixels", "weight")

    def __init__(self, ids, pixels, weight: float):
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.weight = float(weight)

    def __len__(self):
        return self.ids.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield Observation(int(self.ids[i]), self.pixels[i].copy(), self.weight)

    @staticmethod
    def empty() -> "FrameObservations":
        return FrameObservations(np.zeros(0, np.int64), np.zeros((0, 2)), 1.0)


class TrackingMode(Enum):
    TRACKING = "tracking"
    LOST = "lost"


@dataclass(frozen=True)
class TrackingState:
    mode: TrackingMode = TrackingMode.TRACKING
    n_s: int = 0
    steps_lost: int = 0

    def __post_init__(self):
        if self.mode is TrackingMode.TRACKING and self.steps_lost != 0:
            raise ValueError("steps_lost must be 0 while tracking")


def step_tracking(state: TrackingState, n_s: int, theta_track: int,
                  theta_reloc: Optional[int] = None) -> TrackingState:
    """Advance the tracking state machine on this frame's inlier count.

    From TRACKING the bar is theta_track; once LOST, recovery needs
    theta_reloc when given (the relocalization gate), theta_track otherwise.
    """
    bar = theta_track
    if state.mode is TrackingMode.LOST and theta_reloc is not None:
        bar = theta_reloc
    if n_s >= bar:
        return TrackingState(TrackingMode.TRACKING, int(n_s), 0)
    return TrackingState(TrackingMode.LOST, int(n_s), state.steps_lost + 1)


# ---------------------------------------------------------------------------
# identifiability gates

_GATE_SLACK = 1e-12


def _gate_arrays(camera_pose: Pose3, intr: CameraIntrinsics, positions,
                 view_dirs, d1, d2):
    """Vectorized gates (a) and (c) plus cos(alpha2); occlusion handled apart.

    Returns (geometric_ok, pixels, cos_a2).
    """
    pc = positions @ camera_pose.R.T + camera_pose.t
    z = pc[:, 2]
    ok = z > 1e-9
    zz = np.where(ok, z, 1.0)
    u = intr.fx * pc[:, 0] / zz + intr.cx
    v = intr.fy * pc[:, 1] / zz + intr.cy
    ok &= (u >= 0.0) & (u <= intr.width) & (v >= 0.0) & (v <= intr.height)
    to_cam = camera_pose.center[None, :] - positions
    d = np.linalg.norm(to_cam, axis=1)
    ok &= (d >= d1 - _GATE_SLACK) & (d <= d2 + _GATE_SLACK)
    cos_a2 = (to_cam * view_dirs).sum(axis=1) / np.maximum(d, 1e-12)
    return ok, np.column_stack([u, v]), cos_a2


def identifiable(point: MapPoint, camera_pose: Pose3, intrinsics: CameraIntrinsics,
                 scene: Optional[Scene] = None,
                 alpha2_max: float = math.radians(60.0)) -> bool:
    """Deterministic per-point evaluation of all four gates.

    Without a scene the visibility gate is vacuous (free-space assumption).
    """
    ok, _, cos_a2 = _gate_arrays(camera_pose, intrinsics,
                                 point.position[None, :],
                                 point.mean_view_dir[None, :],
                                 np.array([point.d1]), np.array([point.d2]))
    if not ok[0]:
        return False
    if cos_a2[0] < math.cos(alpha2_max) - _GATE_SLACK:
        return False
    if scene is not None:
        if not scene.visible_mask(camera_pose.center,
                                  np.array([point.scene_point_id]))[0]:
            return False
    return True


def identify_probabilistic(point: MapPoint, camera_pose: Pose3,
                           rng: np.random.Generator) -> bool:
    """Bernoulli identification with success probability cos(alpha2).

    Callers must have checked the geometric gates already; this only draws.
    """
    to_cam = camera_pose.center - point.position
    d = np.linalg.norm(to_cam)
    cos_a2 = float(to_cam @ point.mean_view_dir) / max(d, 1e-12)
    p = min(max(cos_a2, 0.0), 1.0)
    return bool(rng.random() < p)


def observe_frame(camera_pose: Pose3, local_map: LocalMap, scene: Scene,
                  intrinsics: CameraIntrinsics, cfg: ObservationConfig,
                  rng: Optional[np.random.Generator] = None,
                  sigma: float = 0.0) -> FrameObservations:
    """Identify local-map points from this view and return pixel observations.

    Stochastic identifiability draws one uniform per candidate in id order,
    so the result is reproducible for a given generator state regardless of
    how many candidates the geometric gates removed.
    """
    if len(local_map) == 0:
        return FrameObservations.empty()
    ok, pixels, cos_a2 = _gate_arrays(camera_pose, intrinsics,
                                      local_map.positions, local_map.view_dirs,
                                      local_map.d1, local_map.d2)
    if cfg.identifiability_mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic identifiability needs an rng")
        draws = rng.random(len(local_map))
        ok &= draws < np.clip(cos_a2, 0.0, 1.0)
    else:
        ok &= cos_a2 >= math.cos(cfg.alpha2_max) - _GATE_SLACK
    idx = np.nonzero(ok)[0]
    if idx.size:
        vis = scene.visible_mask(camera_pose.center, local_map.ids[idx])
        idx = idx[vis]
    if idx.size == 0:
        return FrameObservations.empty()
    pix = pixels[idx]
    weight = 1.0
    if sigma > 0.0:
        if rng is None:
            raise ValueError("pixel noise needs an rng")
        pix = pix + sigma * rng.standard_normal(pix.shape)
        pix[:, 0] = np.clip(pix[:, 0], 0.0, intrinsics.width)
        pix[:, 1] = np.clip(pix[:, 1], 0.0, intrinsics.height)
        weight = 1.0 / (sigma * sigma)
    return FrameObservations(local_map.ids[idx], pix, weight)


def detect_scene_points(scene: Scene, camera_pose: Pose3,
                        intrinsics: CameraIntrinsics, cfg: ObservationConfig,
                        rng: Optional[np.random.Generator] = None,
                        range_cap: Optional[float] = None) -> np.ndarray:
    """Fresh feature detections for mapping: scene points seen by this view.

    Same gates as observe_frame, but the reference direction is the surface
    normal (no map history yet) and the distance gate is just a sensor range.
    """
    cap = cfg.detection_range if range_cap is None else range_cap
    cand = scene.indices_within(camera_pose.center, cap)
    if cand.size == 0:
        return cand
    positions = scene.positions[cand]
    normals = scene.normals[cand]
    ok, _, cos_a2 = _gate_arrays(camera_pose, intrinsics, positions, normals,
                                 np.zeros(cand.size), np.full(cand.size, cap))
    if cfg.identifiability_mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic identifiability needs an rng")
        draws = rng.random(cand.size)
        ok &= draws < np.clip(cos_a2, 0.0, 1.0)
    else:
        ok &= cos_a2 >= math.cos(cfg.alpha2_max) - _GATE_SLACK
    idx = np.nonzero(ok)[0]
    if idx.size:
        vis = scene.visible_mask(camera_pose.center, cand[idx])
        idx = idx[vis]
    return cand[idx]


def inlier_count(camera_pose: Pose3, local_map: LocalMap, scene: Scene,
                 intrinsics: CameraIntrinsics,
                 cfg: Optional[ObservationConfig] = None) -> int:
    """Deterministic N_S: how many local-map points this view identifies."""
    det = replace(cfg or ObservationConfig(), identifiability_mode="deterministic")
    return len(observe_frame(camera_pose, local_map, scene, intrinsics, det))


# ---------------------------------------------------------------------------
# reprojection and pose refinement


def reprojection_error(obs: Observation, point: MapPoint,
                       camera_pose: Pose3, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Observed pixel minus predicted projection."""
    from .geometry import project
    return np.asarray(obs.pixel, dtype=float) - project(intrinsics, camera_pose,
                                                        point.position)


def _residuals_and_jacobian(pose: Pose3, positions, pixels, intr: CameraIntrinsics,
                            want_jacobian: bool = True):
    """Stacked residuals (K,2) and Jacobians (K,2,6) of e = z - pi(R P + t).

    The pose increment is left-multiplicative: p_cam perturbs as
    R_delta p + rho, so dp/drho = I and dp/dtheta = -[p]x.
    Rows with non-positive depth return cost infinity via the mask.
    """
    pc = positions @ pose.R.T + pose.t
    z = pc[:, 2]
    good = z > 1e-9
    zz = np.where(good, z, 1.0)
    u = intr.fx * pc[:, 0] / zz + intr.cx
    v = intr.fy * pc[:, 1] / zz + intr.cy
    res = pixels - np.column_stack([u, v])
    if not want_jacobian:
        return res, good, None
    k = positions.shape[0]
    inv_z = 1.0 / zz
    x, y = pc[:, 0], pc[:, 1]
    # dpi/dp rows
    dpi = np.zeros((k, 2, 3))
    dpi[:, 0, 0] = intr.fx * inv_z
    dpi[:, 0, 2] = -intr.fx * x * inv_z * inv_z
    dpi[:, 1, 1] = intr.fy * inv_z
    dpi[:, 1, 2] = -intr.fy * y * inv_z * inv_z
    # dp/dxi = [ I | -[p]x ]
    dp = np.zeros((k, 3, 6))
    dp[:, 0, 0] = dp[:, 1, 1] = dp[:, 2, 2] = 1.0
    dp[:, 0, 4] = pc[:, 2]
    dp[:, 0, 5] = -pc[:, 1]
    dp[:, 1, 3] = -pc[:, 2]
    dp[:, 1, 5] = pc[:, 0]
    dp[:, 2, 3] = pc[:, 1]
    dp[:, 2, 4] = -pc[:, 0]
    jac = -np.einsum("kij,kjl->kil", dpi, dp)
    return res, good, jac


def _weighted_cost(res, good, weights) -> float:
    if not np.all(good):
        return float("inf")
    return float((weights * (res ** 2).sum(axis=1)).sum())


def _collect(observations, map_points):
    """Normalize (observations, map_points) into flat arrays."""
    if isinstance(observations, FrameObservations):
        ids = observations.ids
        pixels = observations.pixels
        weights = np.full(ids.shape[0], observations.weight)
    else:
        obs = list(observations)
        ids = np.array([o.point_id for o in obs], dtype=np.int64)
        pixels = np.array([o.pixel for o in obs], dtype=float).reshape(-1, 2)
        weights = np.array([o.weight for o in obs], dtype=float)
    if isinstance(map_points, LocalMap):
        rows = np.searchsorted(map_points.ids, ids)
        if np.any(rows >= len(map_points)) or np.any(map_points.ids[rows] != ids):
            raise KeyError("observation references a point missing from the local map")
        positions = map_points.positions[rows]
    else:
        positions = np.array([map_points[int(i)].position for i in ids], dtype=float)
    return ids, pixels, weights, positions


def refine_pose(init_pose: Pose3, observations, map_points,
                intrinsics: CameraIntrinsics, max_iters: int = 20,
                step_tol: float = 1e-10,
                cost_trace: Optional[list] = None):
    """Gauss-Newton pose refinement on reprojection errors.

    Minimizes sum_i w_i ||z_i - pi(X P_i)||^2 over the 6-DoF pose with a
    left-multiplicative update.  A step that increases the cost is halved
    (up to 15 times) before giving up, so the accepted-cost sequence never
    increases.  Returns (refined_pose, final_cost).
    """
    ids, pixels, weights, positions = _collect(observations, map_points)
    if ids.shape[0] < 6:
        raise UnderconstrainedError(f"{ids.shape[0]} observations, need >= 6")
    pose = init_pose
    res, good, _ = _residuals_and_jacobian(pose, positions, pixels, intrinsics,
                                           want_jacobian=False)
    cost = _weighted_cost(res, good, weights)
    if cost_trace is not None:
        cost_trace.append(cost)
    for _ in range(max_iters):
        res, good, jac = _residuals_and_jacobian(pose, positions, pixels, intrinsics)
        if not np.all(good):
            raise DegenerateGeometryError("map point behind the camera at the current estimate")
        wj = jac * weights[:, None, None]
        H = np.einsum("kil,kim->lm", wj, jac)
        g = np.einsum("kil,ki->l", wj, res)
        eig = np.linalg.eigvalsh(H)
        if eig[0] < 1e-12 * max(eig[-1], 1.0):
            raise DegenerateGeometryError("normal equations are singular")
        xi = -np.linalg.solve(H, g)
        if np.linalg.norm(xi) < step_tol:
            break
        accepted = False
        for _ in range(15):
            cand = apply_increment(pose, xi)
            res_c, good_c, _ = _residuals_and_jacobian(cand, positions, pixels,
                                                       intrinsics, want_jacobian=False)
            cost_c = _weighted_cost(res_c, good_c, weights)
            if cost_c <= cost:
                pose, cost = cand, cost_c
                accepted = True
                break
            xi = 0.5 * xi
        if cost_trace is not None and accepted:
            cost_trace.append(cost)
        if not accepted:
            break  # no descent direction left at this scale
        if np.linalg.norm(xi) < step_tol:
            break
    return pose, cost


# ---------------------------------------------------------------------------
# relocalization


def try_relocalize(true_camera_pose: Pose3, feature_map, scene: Scene,
                   intrinsics: CameraIntrinsics, cfg: ObservationConfig,
                   sigma: float = 0.0,
                   rng: Optional[np.random.Generator] = None) -> Optional[Pose3]:
    """Place-recognition proxy against the taught keyframes.

    Scans keyframes nearest-first; succeeds on the first whose observed map
    points yield at least theta_reloc deterministic identifications from the
    current true pose.  Returns the (optionally noise-refined) camera pose,
    or None.  Deterministic gates keep recovery reproducible.
    """
    kfs = feature_map.keyframes
    if not kfs:
        return None
    here = true_camera_pose.center
    order = sorted(range(len(kfs)),
                   key=lambda k: float(np.linalg.norm(kfs[k].camera_pose.center - here)))
    det = replace(cfg, identifiability_mode="deterministic")
    for k in order:
        ids = kfs[k].observed_points
        ids = ids[feature_map.alive[ids]]
        if ids.size == 0:
            continue
        # the candidate's covisibility neighborhood, as in normal tracking
        lm = feature_map.local_map(ids)
        if len(lm) < cfg.theta_reloc:
            continue
        obs = observe_frame(true_camera_pose, lm, scene, intrinsics, det,
                            rng=rng, sigma=sigma)
        if len(obs) < cfg.theta_reloc:
            continue
        if sigma <= 0.0:
            return true_camera_pose
        refined, _ = refine_pose(true_camera_pose, obs, lm, intrinsics)
        return refined
    return None
