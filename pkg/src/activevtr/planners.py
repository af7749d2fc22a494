"""Sampling-based next-best-view selection over the pan-tilt grid.

Four planners share one entry-point shape:

* ``plan_flaf``        - score = sum over the filtered set S_r, inside the
                         sample's field of view, of cos(alpha1) * cos(alpha2).
* ``plan_flaf_noscore``- same candidate set, each in-view point counts 1.
* ``plan_udvp``        - all local-map points, weight max(0, 1 - d / d_cap),
                         no identifiability gating (the distance-and-density
                         baseline the scored planner is measured against).
* ``plan_passive``     - always pan-tilt (0, 0).

The hot path exploits two structural facts.  First, with a zero lever arm the
optical center never moves when the head rotates, so the distance, alpha2 and
occlusion gates are sample-independent: they run once per planning tick, not
per sample (``filter_sr``).  Second, for unit direction vectors in the camera
frame cos(alpha1) is simply the z component, so a sample's score is one masked
mat-vec.  Per-pan azimuth bounds and a global elevation bound prune most
points before the tilt sweep; both bounds are exact necessary conditions, so
pruning never changes a score.

With a nonzero lever arm the planner falls back to scoring each sample pose
through the reference scorer (camera center moves with the angles, so nothing
is sample-independent).  That path is orders of magnitude slower and exists
for completeness.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (
    DEFAULT_PTU,
    CameraIntrinsics,
    PanTilt,
    Pose3,
    PtuModel,
    camera_pose_from_robot,
)
from .world import LocalMap, Scene

__all__ = [
    "PanTiltGrid",
    "PlanResult",
    "filter_sr",
    "flaf_score",
    "plan_flaf",
    "plan_flaf_noscore",
    "plan_udvp",
    "plan_passive",
    "PLANNERS",
]


@dataclass(frozen=True)
class PanTiltGrid:
    """Half-open sampling grid: pan_min <= pan < pan_max in ``step`` strides.

    The default 60 degree range at 2 degree spacing yields exactly 30 values
    per axis (endpoints -30, ..., +28 degrees), 900 samples total.
    """

    pan_min: float = math.radians(-30.0)
    pan_max: float = math.radians(30.0)
    tilt_min: float = math.radians(-30.0)
    tilt_max: float = math.radians(30.0)
    step: float = math.radians(2.0)

    def __post_init__(self):
        if self.step <= 0.0:
            raise ValueError("grid step must be positive")
        if self.pan_max <= self.pan_min or self.tilt_max <= self.tilt_min:
            raise ValueError("grid ranges must be non-empty")

    @staticmethod
    def _count(lo: float, hi: float, step: float) -> int:
        # the 1e-9 slack keeps exact-ratio spans (60/2 = 30) from rounding up
        return int(math.ceil((hi - lo) / step - 1e-9))

    @property
    def n_pan(self) -> int:
        return self._count(self.pan_min, self.pan_max, self.step)

    @property
    def n_tilt(self) -> int:
        return self._count(self.tilt_min, self.tilt_max, self.step)

    def __len__(self):
        return self.n_pan * self.n_tilt

    def pans(self) -> np.ndarray:
        return self.pan_min + self.step * np.arange(self.n_pan)

    def tilts(self) -> np.ndarray:
        return self.tilt_min + self.step * np.arange(self.n_tilt)


@dataclass(frozen=True)
class PlanResult:
    best: PanTilt
    best_score: float
    scores: Optional[np.ndarray]  # (n_pan, n_tilt) when retained
    elapsed: float


_GATE_SLACK = 1e-12


def filter_sr(local_map: LocalMap, robot_pose: Pose3, scene: Scene,
              model: PtuModel = DEFAULT_PTU,
              alpha2_max: float = math.radians(60.0)) -> LocalMap:
    """The planning candidate set S_r: local-map points surviving the
    sample-independent gates measured from the pan-tilt mount center.

    Keeps points with d1 <= distance <= d2, alpha2 <= alpha2_max, visible
    (front-facing, unoccluded).  Returns a row-subset of the local map.
    """
    if len(local_map) == 0:
        return local_map
    mount = camera_pose_from_robot(robot_pose, PanTilt(), model).center
    to_mount = mount[None, :] - local_map.positions
    d = np.linalg.norm(to_mount, axis=1)
    ok = (d >= local_map.d1 - _GATE_SLACK) & (d <= local_map.d2 + _GATE_SLACK)
    cos_a2 = (to_mount * local_map.view_dirs).sum(axis=1) / np.maximum(d, 1e-12)
    ok &= cos_a2 >= math.cos(alpha2_max) - _GATE_SLACK
    idx = np.nonzero(ok)[0]
    if idx.size:
        idx = idx[scene.visible_mask(mount, local_map.ids[idx])]
    return LocalMap(keyframe_ids=local_map.keyframe_ids,
                    ids=local_map.ids[idx],
                    positions=local_map.positions[idx],
                    view_dirs=local_map.view_dirs[idx],
                    d1=local_map.d1[idx], d2=local_map.d2[idx],
                    wall_ids=local_map.wall_ids[idx])


def flaf_score(sample_camera_pose: Pose3, sr: LocalMap,
               intrinsics: CameraIntrinsics,
               scene: Optional[Scene] = None) -> float:
    """Reference scorer: sum of cos(alpha1) * cos(alpha2) over in-view points.

    alpha1 is measured between the sample's focal line and the ray to the
    point, alpha2 between the point's reference direction and the ray back to
    the optical center.  A scene enables the per-sample occlusion check; the
    fast planners skip it because their candidate set is pre-filtered from
    the (coincident, zero-lever-arm) mount center.
    """
    if len(sr) == 0:
        return 0.0
    pc = sr.positions @ sample_camera_pose.R.T + sample_camera_pose.t
    z = pc[:, 2]
    ok = z > 1e-9
    zz = np.where(ok, z, 1.0)
    u = intrinsics.fx * pc[:, 0] / zz + intrinsics.cx
    v = intrinsics.fy * pc[:, 1] / zz + intrinsics.cy
    ok &= (u >= 0.0) & (u <= intrinsics.width) & (v >= 0.0) & (v <= intrinsics.height)
    if scene is not None and ok.any():
        idx = np.nonzero(ok)[0]
        ok[idx] &= scene.visible_mask(sample_camera_pose.center, sr.ids[idx])
    if not ok.any():
        return 0.0
    O = sample_camera_pose.center
    f = sample_camera_pose.forward
    rel = sr.positions[ok] - O[None, :]
    dist = np.linalg.norm(rel, axis=1)
    cos_a1 = (rel @ f) / np.maximum(dist, 1e-12)
    cos_a2 = (-(rel) * sr.view_dirs[ok]).sum(axis=1) / np.maximum(dist, 1e-12)
    return float(np.sum(np.clip(cos_a1, 0.0, None) * np.clip(cos_a2, 0.0, None)))


# ---------------------------------------------------------------------------
# fast grid kernel (zero lever arm)


def _grid_scores(dirs_r: np.ndarray, weights: np.ndarray, grid: PanTiltGrid,
                 intr: CameraIntrinsics, cos_weighted: bool,
                 workers: int = 1) -> np.ndarray:
    """Score every (pan, tilt) sample against unit directions in the robot
    frame.  cos_weighted sums weight * cos(alpha1); otherwise weight alone.

    Writing disjoint rows of a preallocated array keeps the result bitwise
    identical for any worker count.
    """
    pans = grid.pans()
    tilts = grid.tilts()
    scores = np.zeros((pans.size, tilts.size))
    if dirs_r.shape[0] == 0:
        return scores
    lox = (0.0 - intr.cx) / intr.fx
    hix = (intr.width - intr.cx) / intr.fx
    loy = (0.0 - intr.cy) / intr.fy
    hiy = (intr.height - intr.cy) / intr.fy
    # exact necessary elevation bound: a direction steeper than the tilt range
    # plus the vertical half-FoV can never land in the image
    vmax = max(abs(float(tilts[0])), abs(float(tilts[-1]))) \
        + max(math.atan(hiy), math.atan(-loy))
    vbound = math.sin(min(math.pi / 2, vmax)) + 1e-12
    keep = np.abs(dirs_r[:, 1]) <= vbound
    if not keep.any():
        return scores
    x = np.ascontiguousarray(dirs_r[keep, 0])
    y = np.ascontiguousarray(dirs_r[keep, 1])
    z = np.ascontiguousarray(dirs_r[keep, 2])
    w = np.ascontiguousarray(weights[keep])
    bmax = max(hix, -lox)
    s1_bound = bmax / math.sqrt(1.0 + bmax * bmax) + 1e-12
    cos_p, sin_p = np.cos(pans), np.sin(pans)
    ct = np.cos(tilts)[:, None]
    st = np.sin(tilts)[:, None]

    def run_rows(i0: int, i1: int):
        for i in range(i0, i1):
            cp, sp = cos_p[i], sin_p[i]
            s1 = cp * x + sp * z         # camera-frame x, tilt-independent
            sel = np.abs(s1) <= s1_bound  # exact azimuth prune for this pan
            if not sel.any():
                continue
            s1k = s1[sel]
            c1k = cp * z[sel] - sp * x[sel]
            yk = y[sel]
            wk = w[sel]
            yc = ct * yk + st * c1k
            zc = ct * c1k - st * yk
            ok = zc > 1e-9
            ok &= s1k >= lox * zc
            ok &= s1k <= hix * zc
            ok &= yc >= loy * zc
            ok &= yc <= hiy * zc
            if cos_weighted:
                scores[i] = (zc * ok) @ wk
            else:
                scores[i] = ok.astype(float) @ wk

    if workers <= 1:
        run_rows(0, pans.size)
    else:
        bounds = np.linspace(0, pans.size, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda k: run_rows(bounds[k], bounds[k + 1]),
                          range(workers)))
    return scores


def _argmax_with_tie_break(scores: np.ndarray, grid: PanTiltGrid) -> tuple:
    """Best sample; ties go to smaller |pan|, then |tilt|, then negatives."""
    best = scores.max()
    flat = np.nonzero(scores == best)
    pans = grid.pans()[flat[0]]
    tilts = grid.tilts()[flat[1]]
    order = np.lexsort((tilts, pans, np.abs(tilts), np.abs(pans)))
    k = order[0]
    return PanTilt(float(pans[k]), float(tilts[k])), float(best)


def _plan_common(robot_pose, local_map, grid, scene, intrinsics, model,
                 current, workers, keep_scores, kind, alpha2_max, d_cap):
    t0 = time.perf_counter()
    if kind in ("flaf", "flaf_noscore"):
        sr = filter_sr(local_map, robot_pose, scene, model, alpha2_max)
    else:
        # UDVP ignores the identifiability gates but not physics: occluded or
        # back-facing points are not observable no matter how close
        sr = local_map
        if len(sr):
            mount = camera_pose_from_robot(robot_pose, PanTilt(), model).center
            vis = scene.visible_mask(mount, sr.ids)
            idx = np.nonzero(vis)[0]
            sr = LocalMap(sr.keyframe_ids, sr.ids[idx], sr.positions[idx],
                          sr.view_dirs[idx], sr.d1[idx], sr.d2[idx],
                          sr.wall_ids[idx])
    if len(sr) == 0:
        return PlanResult(best=current, best_score=0.0,
                          scores=(np.zeros((grid.n_pan, grid.n_tilt))
                                  if keep_scores else None),
                          elapsed=time.perf_counter() - t0)
    if model.has_lever_arm:
        scores = _scores_by_reference(robot_pose, sr, grid, scene, intrinsics,
                                      model, kind, d_cap)
    else:
        mount = camera_pose_from_robot(robot_pose, PanTilt(), model).center
        rel = sr.positions - mount[None, :]
        dist = np.linalg.norm(rel, axis=1)
        dirs_w = rel / np.maximum(dist, 1e-12)[:, None]
        dirs_r = dirs_w @ robot_pose.R.T
        if kind == "flaf":
            weights = (-(dirs_w) * sr.view_dirs).sum(axis=1)  # = cos(alpha2)
            scores = _grid_scores(dirs_r, weights, grid, intrinsics,
                                  cos_weighted=True, workers=workers)
        elif kind == "flaf_noscore":
            scores = _grid_scores(dirs_r, np.ones(len(sr)), grid, intrinsics,
                                  cos_weighted=False, workers=workers)
        else:  # udvp
            weights = np.maximum(0.0, 1.0 - dist / d_cap)
            scores = _grid_scores(dirs_r, weights, grid, intrinsics,
                                  cos_weighted=False, workers=workers)
    best, best_score = _argmax_with_tie_break(scores, grid)
    return PlanResult(best=best, best_score=best_score,
                      scores=scores if keep_scores else None,
                      elapsed=time.perf_counter() - t0)


def _scores_by_reference(robot_pose, sr, grid, scene, intrinsics, model,
                         kind, d_cap):
    """Per-sample scoring for the lever-arm case: correct, not fast."""
    pans, tilts = grid.pans(), grid.tilts()
    scores = np.zeros((pans.size, tilts.size))
    for i, pan in enumerate(pans):
        for j, tilt in enumerate(tilts):
            pose = camera_pose_from_robot(robot_pose, PanTilt(pan, tilt), model)
            if kind == "flaf":
                scores[i, j] = flaf_score(pose, sr, intrinsics, scene)
            else:
                pc = sr.positions @ pose.R.T + pose.t
                z = pc[:, 2]
                ok = z > 1e-9
                zz = np.where(ok, z, 1.0)
                u = intrinsics.fx * pc[:, 0] / zz + intrinsics.cx
                v = intrinsics.fy * pc[:, 1] / zz + intrinsics.cy
                ok &= (u >= 0) & (u <= intrinsics.width) & (v >= 0) & (v <= intrinsics.height)
                idx = np.nonzero(ok)[0]
                if idx.size:
                    ok[idx] &= scene.visible_mask(pose.center, sr.ids[idx])
                if kind == "flaf_noscore":
                    scores[i, j] = float(ok.sum())
                else:
                    d = np.linalg.norm(sr.positions - pose.center[None, :], axis=1)
                    scores[i, j] = float((np.maximum(0.0, 1.0 - d / d_cap) * ok).sum())
    return scores


# ---------------------------------------------------------------------------
# public planners


def plan_flaf(robot_pose: Pose3, local_map: LocalMap, grid: PanTiltGrid, *,
              scene: Scene, intrinsics: CameraIntrinsics,
              model: PtuModel = DEFAULT_PTU, current: PanTilt = PanTilt(),
              alpha2_max: float = math.radians(60.0), workers: int = 1,
              keep_scores: bool = False, d_cap: float = 10.0) -> PlanResult:
    """Identifiability-weighted view selection (the scored planner)."""
    return _plan_common(robot_pose, local_map, grid, scene, intrinsics, model,
                        current, workers, keep_scores, "flaf", alpha2_max, d_cap)


def plan_flaf_noscore(robot_pose: Pose3, local_map: LocalMap, grid: PanTiltGrid, *,
                      scene: Scene, intrinsics: CameraIntrinsics,
                      model: PtuModel = DEFAULT_PTU, current: PanTilt = PanTilt(),
                      alpha2_max: float = math.radians(60.0), workers: int = 1,
                      keep_scores: bool = False, d_cap: float = 10.0) -> PlanResult:
    """Ablation: same candidate gates, in-view points count 1 each."""
    return _plan_common(robot_pose, local_map, grid, scene, intrinsics, model,
                        current, workers, keep_scores, "flaf_noscore",
                        alpha2_max, d_cap)


def plan_udvp(robot_pose: Pose3, local_map: LocalMap, grid: PanTiltGrid, *,
              scene: Scene, intrinsics: CameraIntrinsics,
              model: PtuModel = DEFAULT_PTU, current: PanTilt = PanTilt(),
              alpha2_max: float = math.radians(60.0), workers: int = 1,
              keep_scores: bool = False, d_cap: float = 10.0) -> PlanResult:
    """Density-and-proximity baseline: closer and more numerous wins."""
    return _plan_common(robot_pose, local_map, grid, scene, intrinsics, model,
                        current, workers, keep_scores, "udvp", alpha2_max, d_cap)


def plan_passive(robot_pose: Pose3, local_map: LocalMap, grid: PanTiltGrid, *,
                 scene: Scene = None, intrinsics: CameraIntrinsics = None,
                 model: PtuModel = DEFAULT_PTU, current: PanTilt = PanTilt(),
                 alpha2_max: float = math.radians(60.0), workers: int = 1,
                 keep_scores: bool = False, d_cap: float = 10.0) -> PlanResult:
    """Fixed forward camera."""
    t0 = time.perf_counter()
    return PlanResult(best=PanTilt(0.0, 0.0), best_score=0.0, scores=None,
                      elapsed=time.perf_counter() - t0)


PLANNERS = {
    "flaf": plan_flaf,
    "flaf_noscore": plan_flaf_noscore,
    "udvp": plan_udvp,
    "passive": plan_passive,
}
