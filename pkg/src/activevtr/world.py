"""Ground-truth world model and the map built while teaching.

The world is a set of vertical wall segments on a ground plane.  Feature
texture is sampled onto the wall faces by a seeded, stratified process, so a
scenario always produces the same scene.  Walls are opaque over their full
height; occlusion is a 2-D test in the ground plane (corners are what matter
for the failure cases, not parapets).

Wall winding convention: walking from ``a`` to ``b`` the wall face (and the
normals of every point on it) is on the LEFT.  Rooms are therefore authored
counter-clockwise so normals face into free space.

Map structures: ``Keyframe`` and ``MapPoint`` follow the usual VSLAM shapes.
A scene point is promoted to a map point once it has been identified from two
keyframes (a triangulation proxy: positions are taken as exact).  Map points
reuse the scene point id, which keeps the scene-to-map bookkeeping 1:1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import PanTilt, Pose3

__all__ = [
    "InvalidScenarioError",
    "DegenerateNormalError",
    "Wall",
    "Scenario",
    "ScenePoint",
    "Scene",
    "MapPoint",
    "Keyframe",
    "LocalMap",
    "FeatureMap",
    "generate_scene",
    "build_local_map",
    "update_mean_view_dir",
    "mean_view_dir",
]


class InvalidScenarioError(ValueError):
    """Scenario fails a structural requirement."""


class DegenerateNormalError(ValueError):
    """Mean view direction has near-zero norm (opposing views)."""


@dataclass(frozen=True)
class Wall:
    """A vertical wall segment: base endpoints, height, feature density.

    ``density`` is points per square meter of face; ``None`` defers to the
    scenario-wide ``texture_density`` and 0 means a blank (low-texture) wall.
    """

    a: tuple
    b: tuple
    height: float = 2.5
    density: Optional[float] = None

    def __post_init__(self):
        if self.height <= 0.0:
            raise InvalidScenarioError(f"wall height must be positive, got {self.height}")
        if self.density is not None and self.density < 0.0:
            raise InvalidScenarioError(f"wall density must be >= 0, got {self.density}")
        if self.length < 1e-9:
            raise InvalidScenarioError(f"wall endpoints coincide: {self.a}")

    @property
    def length(self) -> float:
        return math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1])

    @property
    def area(self) -> float:
        return self.length * self.height

    @property
    def direction(self) -> np.ndarray:
        d = np.array([self.b[0] - self.a[0], self.b[1] - self.a[1]])
        return d / self.length

    @property
    def normal2(self) -> np.ndarray:
        """Unit face normal in the plane: 90 degrees CCW from a->b (left side)."""
        d = self.direction
        return np.array([-d[1], d[0]])


@dataclass(frozen=True)
class Scenario:
    """World + experiment layout; pure data, validated on construction."""

    name: str
    walls: tuple
    taught_path: np.ndarray  # (K, 3) rows of x, y, heading
    rng_seed: int
    sim_rate_hz: float = 20.0
    plan_every_steps: int = 5
    texture_density: float = 0.0
    sampling_mode: str = "exact"  # or "poisson"
    camera_height: float = 0.4

    def __post_init__(self):
        path = np.asarray(self.taught_path, dtype=float)
        if path.ndim != 2 or path.shape[1] != 3 or path.shape[0] < 2:
            raise InvalidScenarioError("taught_path needs >= 2 waypoints of (x, y, heading)")
        steps = np.linalg.norm(np.diff(path[:, :2], axis=0), axis=1)
        if np.any(steps < 1e-9):
            raise InvalidScenarioError("taught_path has coincident consecutive waypoints")
        object.__setattr__(self, "taught_path", path)
        object.__setattr__(self, "walls", tuple(self.walls))
        if self.texture_density < 0.0:
            raise InvalidScenarioError("texture_density must be >= 0")
        if self.sim_rate_hz <= 0.0:
            raise InvalidScenarioError("sim_rate_hz must be positive")
        if self.plan_every_steps < 1:
            raise InvalidScenarioError("plan_every_steps must be >= 1")
        if self.sampling_mode not in ("exact", "poisson"):
            raise InvalidScenarioError(f"unknown sampling_mode {self.sampling_mode!r}")

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_rate_hz


@dataclass(frozen=True)
class ScenePoint:
    id: int
    position: np.ndarray
    surface_normal: np.ndarray
    wall_id: int


class Scene:
    """Columnar ground-truth texture with visibility queries.

    Iterating yields ``ScenePoint`` records; the arrays are the fast path.
    """

    def __init__(self, walls, positions, normals, wall_ids):
        self.walls = tuple(walls)
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.wall_ids = np.asarray(wall_ids, dtype=np.int64).reshape(-1)
        self._wa = np.array([w.a for w in self.walls], dtype=float).reshape(-1, 2)
        self._wb = np.array([w.b for w in self.walls], dtype=float).reshape(-1, 2)

    def __len__(self):
        return self.positions.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self.point(i)

    def point(self, i: int) -> ScenePoint:
        return ScenePoint(id=int(i), position=self.positions[i].copy(),
                          surface_normal=self.normals[i].copy(), wall_id=int(self.wall_ids[i]))

    # -- visibility ------------------------------------------------
    def blocked_mask(self, cam_center, idx=None) -> np.ndarray:
        """True where the 2-D ray from the camera crosses some OTHER wall."""
        pts = self.positions if idx is None else self.positions[idx]
        own = self.wall_ids if idx is None else self.wall_ids[idx]
        return _ray_blocked(self._wa, self._wb, np.asarray(cam_center, float)[:2],
                            pts[:, :2], own)

    def front_mask(self, cam_center, idx=None) -> np.ndarray:
        """True where the camera is on the face side of the point's wall."""
        pts = self.positions if idx is None else self.positions[idx]
        nrm = self.normals if idx is None else self.normals[idx]
        c = np.asarray(cam_center, float)[:2]
        to_cam = c[None, :] - pts[:, :2]
        return (to_cam * nrm[:, :2]).sum(axis=1) > 1e-12

    def visible_mask(self, cam_center, idx=None) -> np.ndarray:
        """Front-facing and not occluded (projection/range gates live elsewhere)."""
        return self.front_mask(cam_center, idx) & ~self.blocked_mask(cam_center, idx)

    def indices_within(self, center, radius: float) -> np.ndarray:
        d2 = ((self.positions - np.asarray(center, float)[None, :]) ** 2).sum(axis=1)
        return np.nonzero(d2 <= radius * radius)[0]


def _cross2(u, v):
    # z-component of the planar cross product, broadcasting over leading dims
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _ray_blocked(wa, wb, cam_xy, pts_xy, own_wall):
    """Proper-crossing test of rays cam->point against every wall segment.

    Touching a segment endpoint does not block (strict inequalities), so a
    ray grazing a shared corner still sees through; points sitting exactly on
    their own wall are excluded by wall id instead of by epsilon games.
    """
    m = pts_xy.shape[0]
    if m == 0 or wa.shape[0] == 0:
        return np.zeros(m, dtype=bool)
    e = wb - wa                                  # (W, 2) wall edge vectors
    r = pts_xy[None, :, :] - cam_xy[None, None, :]  # (1, M, 2) ray vectors
    ca = cam_xy[None, :] - wa                    # (W, 2) wall start -> camera
    pa = pts_xy[None, :, :] - wa[:, None, :]     # (W, M, 2)
    d1 = _cross2(e, ca)[:, None]                 # side of the wall the camera is on
    d2 = _cross2(e[:, None, :], pa)              # side the point is on
    d3 = _cross2(r, ca[:, None, :])              # wall start vs the ray
    cb = cam_xy[None, :] - wb
    d4 = _cross2(r, cb[:, None, :])              # wall end vs the ray
    crossing = (d1 * d2 < -1e-12) & (d3 * d4 < -1e-12)
    crossing &= np.arange(wa.shape[0])[:, None] != np.asarray(own_wall)[None, :]
    return crossing.any(axis=0)


def generate_scene(scenario: Scenario) -> Scene:
    """Sample feature points onto every wall face, deterministically.

    Exact mode places floor(density * area) points per wall, stratified
    along the wall length with uniform height jitter; poisson mode draws the
    count first.  Each wall gets its own child generator keyed by
    (rng_seed, wall index), so editing one wall never reshuffles the others.
    """
    if len(scenario.walls) == 0:
        raise InvalidScenarioError("scenario has no walls")
    positions, normals, wall_ids = [], [], []
    for wi, wall in enumerate(scenario.walls):
        density = wall.density if wall.density is not None else scenario.texture_density
        rng = np.random.default_rng([scenario.rng_seed, wi])
        if scenario.sampling_mode == "exact":
            count = int(math.floor(density * wall.area + 1e-9))
        else:
            count = int(rng.poisson(density * wall.area))
        if count == 0:
            continue
        # stratified along the length; jittered height off the floor/ceiling
        u = (np.arange(count) + rng.random(count)) / count
        v = rng.uniform(0.05 * wall.height, 0.95 * wall.height, count)
        a = np.asarray(wall.a, dtype=float)
        xy = a[None, :] + u[:, None] * (wall.direction * wall.length)[None, :]
        n2 = wall.normal2
        positions.append(np.column_stack([xy, v]))
        normals.append(np.tile([n2[0], n2[1], 0.0], (count, 1)))
        wall_ids.append(np.full(count, wi, dtype=np.int64))
    if positions:
        pos = np.vstack(positions)
        nrm = np.vstack(normals)
        wid = np.concatenate(wall_ids)
    else:
        pos = np.zeros((0, 3))
        nrm = np.zeros((0, 3))
        wid = np.zeros(0, dtype=np.int64)
    return Scene(scenario.walls, pos, nrm, wid)


# ---------------------------------------------------------------------------
# map structures


@dataclass
class MapPoint:
    """Triangulated landmark with its identifiability envelope."""

    id: int
    position: np.ndarray
    mean_view_dir: np.ndarray  # n_p: unit, from the point toward the mean camera
    d1: float
    d2: float
    observing_keyframes: tuple  # insertion order; first entry set d1/d2
    scene_point_id: int


@dataclass(frozen=True)
class Keyframe:
    id: int
    camera_pose: Pose3
    ptu_angles: PanTilt
    robot_pose: Pose3
    timestamp: float
    observed_points: np.ndarray  # sorted unique point ids


@dataclass(frozen=True)
class LocalMap:
    """Covisibility neighborhood as flat arrays (rows align across fields)."""

    keyframe_ids: tuple
    ids: np.ndarray
    positions: np.ndarray
    view_dirs: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    wall_ids: np.ndarray

    @property
    def points(self) -> frozenset:
        return frozenset(int(i) for i in self.ids)

    def __len__(self):
        return self.ids.shape[0]


def _empty_local_map() -> LocalMap:
    return LocalMap(keyframe_ids=(), ids=np.zeros(0, dtype=np.int64),
                    positions=np.zeros((0, 3)), view_dirs=np.zeros((0, 3)),
                    d1=np.zeros(0), d2=np.zeros(0), wall_ids=np.zeros(0, dtype=np.int64))


def mean_view_dir(position, camera_centers) -> np.ndarray:
    """Normalized mean of unit vectors from ``position`` toward each center."""
    centers = np.asarray(camera_centers, dtype=float).reshape(-1, 3)
    d = centers - np.asarray(position, dtype=float)[None, :]
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateNormalError("camera center coincides with the point")
    mean = (d / norms[:, None]).mean(axis=0)
    n = np.linalg.norm(mean)
    if n < 1e-9:
        raise DegenerateNormalError("opposing views average to a zero direction")
    return mean / n


def update_mean_view_dir(point: MapPoint, keyframes) -> MapPoint:
    """Recompute n_p from the point's observing keyframes."""
    by_id = {kf.id: kf for kf in keyframes}
    centers = [by_id[k].camera_pose.center for k in point.observing_keyframes]
    if not centers:
        raise DegenerateNormalError("point has no observing keyframes")
    return MapPoint(id=point.id, position=point.position,
                    mean_view_dir=mean_view_dir(point.position, centers),
                    d1=point.d1, d2=point.d2,
                    observing_keyframes=point.observing_keyframes,
                    scene_point_id=point.scene_point_id)


def build_local_map(all_keyframes, all_points, current_observed,
                    scene: Optional[Scene] = None) -> LocalMap:
    """Reference covisibility query over plain keyframe/point records.

    Local map = every keyframe sharing at least one currently observed point,
    plus all map points those keyframes observe.  ``all_points`` maps point
    id to MapPoint; observed ids with no map point yet are simply skipped.
    Without a scene, wall ids are set to -1 (no own-wall occlusion exclusion).
    """
    observed = set(int(i) for i in current_observed)
    if not observed:
        return _empty_local_map()
    kfs = [kf for kf in all_keyframes
           if observed.intersection(int(i) for i in kf.observed_points)]
    if not kfs:
        return _empty_local_map()
    ids = sorted({int(i) for kf in kfs for i in kf.observed_points} & set(all_points))
    if not ids:
        return _empty_local_map()
    pts = [all_points[i] for i in ids]
    if scene is not None:
        wall_ids = scene.wall_ids[np.array([p.scene_point_id for p in pts])]
    else:
        wall_ids = np.full(len(pts), -1, dtype=np.int64)
    return LocalMap(
        keyframe_ids=tuple(kf.id for kf in kfs),
        ids=np.array(ids, dtype=np.int64),
        positions=np.array([p.position for p in pts], dtype=float),
        view_dirs=np.array([p.mean_view_dir for p in pts], dtype=float),
        d1=np.array([p.d1 for p in pts], dtype=float),
        d2=np.array([p.d2 for p in pts], dtype=float),
        wall_ids=wall_ids,
    )


class FeatureMap:
    """The map grown during teaching: keyframes plus promoted map points.

    Storage is columnar over scene point ids so local-map gathers are plain
    fancy indexing.  A single writer mutates it between planning ticks; the
    repeat phase treats it as frozen (``content_hash`` guards that).
    """

    def __init__(self, scene: Scene, d_range_ratio: float = 1.4):
        if d_range_ratio <= 1.0:
            raise InvalidScenarioError("d_range_ratio must exceed 1")
        self.scene = scene
        self.d_range_ratio = float(d_range_ratio)
        n = len(scene)
        self.alive = np.zeros(n, dtype=bool)
        self.view_dirs = np.zeros((n, 3))
        self.d1 = np.zeros(n)
        self.d2 = np.zeros(n)
        self._dir_sums = np.zeros((n, 3))  # running sum of unit view dirs
        self._n_obs = np.zeros(n, dtype=np.int64)
        self.keyframes: list = []
        self._observers: dict = {}  # point id -> [keyframe ids, insertion order]
        self._kf_centers: list = []

    # -- teach-side mutation ------------------------------------------------
    def insert_keyframe(self, camera_pose: Pose3, ptu_angles: PanTilt,
                        robot_pose: Pose3, timestamp: float,
                        detected_ids) -> Keyframe:
        """Record a keyframe and promote points now seen twice."""
        if self.keyframes and timestamp <= self.keyframes[-1].timestamp:
            raise InvalidScenarioError("keyframe timestamps must strictly increase")
        ids = np.unique(np.asarray(detected_ids, dtype=np.int64))
        kf = Keyframe(id=len(self.keyframes), camera_pose=camera_pose,
                      ptu_angles=ptu_angles, robot_pose=robot_pose,
                      timestamp=float(timestamp), observed_points=ids)
        self.keyframes.append(kf)
        center = camera_pose.center
        self._kf_centers.append(center)
        if ids.size:
            d = self.scene.positions[ids] - center[None, :]
            dirs = d / np.linalg.norm(d, axis=1)[:, None]
            self._dir_sums[ids] -= dirs  # unit vectors point -> camera
            self._n_obs[ids] += 1
        for i in ids:
            self._observers.setdefault(int(i), []).append(kf.id)
        promote = ids[(self._n_obs[ids] == 2) & ~self.alive[ids]]
        if promote.size:
            first = np.array([self._kf_centers[self._observers[int(i)][0]] for i in promote])
            d_create = np.linalg.norm(self.scene.positions[promote] - first, axis=1)
            self.d1[promote] = d_create / self.d_range_ratio
            self.d2[promote] = d_create * self.d_range_ratio
            self.alive[promote] = True
        touched = ids[self.alive[ids]]
        if touched.size:
            sums = self._dir_sums[touched]
            norms = np.linalg.norm(sums, axis=1)
            if np.any(norms < 1e-9):
                raise DegenerateNormalError("opposing views average to a zero direction")
            self.view_dirs[touched] = sums / norms[:, None]
        return kf

    # -- queries --------------------------------------------------------
    @property
    def n_points(self) -> int:
        return int(self.alive.sum())

    @property
    def point_ids(self) -> np.ndarray:
        return np.nonzero(self.alive)[0]

    def point(self, i: int) -> MapPoint:
        if not self.alive[i]:
            raise KeyError(f"point {i} is not in the map")
        return MapPoint(id=int(i), position=self.scene.positions[i].copy(),
                        mean_view_dir=self.view_dirs[i].copy(),
                        d1=float(self.d1[i]), d2=float(self.d2[i]),
                        observing_keyframes=tuple(self._observers[int(i)]),
                        scene_point_id=int(i))

    def local_map(self, current_observed) -> LocalMap:
        """Covisibility local map; columnar fast path of build_local_map."""
        observed = np.unique(np.asarray(current_observed, dtype=np.int64))
        if observed.size == 0 or not self.keyframes:
            return _empty_local_map()
        kf_ids = sorted({k for i in observed for k in self._observers.get(int(i), ())})
        if not kf_ids:
            return _empty_local_map()
        ids = np.unique(np.concatenate(
            [self.keyframes[k].observed_points for k in kf_ids]))
        ids = ids[self.alive[ids]]
        if ids.size == 0:
            return _empty_local_map()
        return LocalMap(keyframe_ids=tuple(kf_ids), ids=ids,
                        positions=self.scene.positions[ids],
                        view_dirs=self.view_dirs[ids],
                        d1=self.d1[ids], d2=self.d2[ids],
                        wall_ids=self.scene.wall_ids[ids])

    def full_local_map(self) -> LocalMap:
        """Every map point, as if all keyframes were covisible."""
        ids = self.point_ids
        if ids.size == 0:
            return _empty_local_map()
        return LocalMap(keyframe_ids=tuple(kf.id for kf in self.keyframes), ids=ids,
                        positions=self.scene.positions[ids],
                        view_dirs=self.view_dirs[ids],
                        d1=self.d1[ids], d2=self.d2[ids],
                        wall_ids=self.scene.wall_ids[ids])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.alive.tobytes())
        h.update(self.view_dirs.tobytes())
        h.update(self.d1.tobytes())
        h.update(self.d2.tobytes())
        h.update(np.int64(len(self.keyframes)).tobytes())
        for kf in self.keyframes:
            h.update(kf.observed_points.tobytes())
        return h.hexdigest()
