"""Rigid-body geometry for a pan-tilt camera on a ground robot.

Conventions used across the package:

* A ``Pose3`` maps world coordinates into the body frame (the tracker
  convention: the stored transform is world-to-body, so ``pose.apply(p_w)``
  gives body-frame coordinates).  The camera body frame is the usual optical
  frame: x right, y down, z along the focal line.
* The robot pose uses the same frame as the camera at zero pan-tilt, so the
  planar robot state (x, y, heading) is lifted with z-forward along the
  heading, y pointing at the floor and x to the robot's right.
* Pan is positive turning the focal line left (counter-clockwise seen from
  above), tilt is positive raising it.  Both are radians.

Rotations are stored as unit quaternions (w, x, y, z) and renormalized after
every composition; the cached 3x3 matrix is derived from the quaternion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AngleLimitError",
    "DegenerateInputError",
    "BehindCameraError",
    "PanTilt",
    "PtuModel",
    "Pose3",
    "CameraIntrinsics",
    "default_intrinsics",
    "compose",
    "inverse",
    "apply_increment",
    "angle_between",
    "ptu_transform",
    "camera_pose_from_robot",
    "robot_pose_from_camera",
    "pose_from_planar",
    "planar_from_pose",
    "project",
    "back_project",
    "in_image",
    "DEFAULT_PTU",
]


class AngleLimitError(ValueError):
    """Commanded pan-tilt angles outside the unit's mechanical limits."""


class DegenerateInputError(ValueError):
    """A direction vector too short to normalize."""


class BehindCameraError(ValueError):
    """Projection requested for a point at non-positive depth."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)

def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_normalize(q):
    n = math.sqrt(float(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]))
    if n < 1e-15:
        raise DegenerateInputError("zero-norm quaternion")
    return q / n


def _quat_to_matrix(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def _quat_from_matrix(R):
    # Shepperd's method; robust for all sign cases.
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return _quat_normalize(q)


def _quat_from_rotvec(rv):
    angle = math.sqrt(float(rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2]))
    if angle < 1e-12:
        # first-order expansion keeps tiny updates exact enough for the solver
        half = 0.5
        q = np.array([1.0, half * rv[0], half * rv[1], half * rv[2]])
        return _quat_normalize(q)
    axis = np.asarray(rv, dtype=float) / angle
    s = math.sin(0.5 * angle)
    return np.array([math.cos(0.5 * angle), s * axis[0], s * axis[1], s * axis[2]])


class Pose3:
    """Rigid transform mapping world coordinates into a body frame.

    ``apply`` computes R @ p + t.  The optical/body center expressed in the
    world frame is ``center`` (= -R^T t).
    """

    __slots__ = ("q", "t", "R")

    def __init__(self, q, t, _normalize=True):
        q = np.asarray(q, dtype=float)
        if _normalize:
            q = _quat_normalize(q)
        self.q = q
        self.t = np.asarray(t, dtype=float).reshape(3)
        self.R = _quat_to_matrix(q)

    # -- constructors -------------------------------------------------
    @staticmethod
    def identity() -> "Pose3":
        return Pose3(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3), _normalize=False)

    @staticmethod
    def from_matrix(R, t) -> "Pose3":
        return Pose3(_quat_from_matrix(np.asarray(R, dtype=float)), t, _normalize=False)

    @staticmethod
    def from_rotvec(rv, t) -> "Pose3":
        return Pose3(_quat_from_rotvec(rv), t, _normalize=False)

    # -- queries --------------------------------------------------------
    @property
    def center(self) -> np.ndarray:
        """Body origin (e.g. camera optical center) in world coordinates."""
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        """Body +z axis (the focal line for a camera pose) in world coordinates."""
        return self.R[2, :].copy()

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def __repr__(self):
        return f"Pose3(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    """a after b: the transform applying b first, then a."""
    q = _quat_normalize(_quat_mul(a.q, b.q))
    t = a.R @ b.t + a.t
    return Pose3(q, t, _normalize=False)


def inverse(p: Pose3) -> Pose3:
    q = np.array([p.q[0], -p.q[1], -p.q[2], -p.q[3]])
    return Pose3(q, -(p.R.T @ p.t), _normalize=False)


def apply_increment(pose: Pose3, xi) -> Pose3:
    """Left-multiplicative update used by the pose solver.

    ``xi`` stacks (rho, theta): a translation increment and a rotation vector.
    The perturbation pose (Exp(theta), rho) is composed onto ``pose``.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    delta = Pose3.from_rotvec(xi[3:], xi[:3])
    return compose(delta, pose)


def angle_between(u, v) -> float:
    """Angle in radians between two direction vectors.

    Raises DegenerateInputError below 1e-12 norm.  Uses atan2 of the
    cross/dot pair, which stays accurate near 0 and pi.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateInputError("angle_between called with near-zero vector")
    c = float(np.dot(u, v))
    s = float(np.linalg.norm(np.cross(u, v)))
    return math.atan2(s, c)


# ---------------------------------------------------------------------------
# pan-tilt unit

@dataclass(frozen=True)
class PanTilt:
    pan: float = 0.0
    tilt: float = 0.0


@dataclass(frozen=True)
class PtuModel:
    """Pan-tilt unit: symmetric angle limits and a fixed mount offset.

    ``lever_arm`` is the camera center expressed in the robot frame; the head
    rotates about that point, so the offset does not move with the angles.
    """

    pan_limit: float = math.radians(30.0)
    tilt_limit: float = math.radians(30.0)
    lever_arm: tuple = (0.0, 0.0, 0.0)

    @property
    def has_lever_arm(self) -> bool:
        return any(abs(v) > 0.0 for v in self.lever_arm)


DEFAULT_PTU = PtuModel()

_LIMIT_SLACK = 1e-12  # grid endpoints sit exactly on the limit


def ptu_transform(q: PanTilt, model: PtuModel = DEFAULT_PTU) -> Pose3:
    """Camera-from-robot transform for pan-tilt command ``q``.

    The head yaws by ``pan`` about the mount's vertical axis, then pitches by
    ``tilt`` about the rotated lateral axis.  At (0, 0) the camera frame
    coincides with the robot frame (up to the lever arm).
    """
    if abs(q.pan) > model.pan_limit + _LIMIT_SLACK or abs(q.tilt) > model.tilt_limit + _LIMIT_SLACK:
        raise AngleLimitError(
            f"pan-tilt ({math.degrees(q.pan):.2f}, {math.degrees(q.tilt):.2f}) deg "
            f"outside limits (+-{math.degrees(model.pan_limit):.1f}, +-{math.degrees(model.tilt_limit):.1f})")
    cp, sp = math.cos(q.pan), math.sin(q.pan)
    ct, st = math.cos(q.tilt), math.sin(q.tilt)
    # R_cam<-robot = Rx(-tilt) @ Ry(pan) in the optical frame (y down, so the
    # mount's up axis is -y and positive pan turns the focal line left).
    R = np.array([
        [cp, 0.0, sp],
        [-st * sp, ct, st * cp],
        [-ct * sp, -st, ct * cp],
    ])
    L = np.asarray(model.lever_arm, dtype=float)
    return Pose3.from_matrix(R, -R @ L)


def camera_pose_from_robot(robot_pose: Pose3, q: PanTilt, model: PtuModel = DEFAULT_PTU) -> Pose3:
    return compose(ptu_transform(q, model), robot_pose)


def robot_pose_from_camera(camera_pose: Pose3, q: PanTilt, model: PtuModel = DEFAULT_PTU) -> Pose3:
    return compose(inverse(ptu_transform(q, model)), camera_pose)


def pose_from_planar(x: float, y: float, heading: float, height: float = 0.0) -> Pose3:
    """Lift a planar pose to a Pose3 whose +z axis points along the heading."""
    ch, sh = math.cos(heading), math.sin(heading)
    # body axes in world columns: x_b right, y_b down, z_b forward
    R_wb = np.array([
        [sh, 0.0, ch],
        [-ch, 0.0, sh],
        [0.0, -1.0, 0.0],
    ])
    R = R_wb.T
    c = np.array([x, y, height])
    return Pose3.from_matrix(R, -R @ c)


def planar_from_pose(pose: Pose3):
    """Inverse of pose_from_planar; heading from the forward axis."""
    c = pose.center
    f = pose.forward
    return float(c[0]), float(c[1]), math.atan2(f[1], f[0])


# ---------------------------------------------------------------------------
# pinhole camera

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("intrinsics must have positive focal lengths and image size")

    @staticmethod
    def from_fov(width: int = 640, height: int = 480,
                 hfov_deg: float = 69.0, vfov_deg: float = 42.0) -> "CameraIntrinsics":
        fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        fy = (height / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
        return CameraIntrinsics(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                                width=width, height=height)

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan((self.width / 2.0) / self.fx)

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan((self.height / 2.0) / self.fy)


def default_intrinsics() -> CameraIntrinsics:
    """640x480 with 69 x 42 degree fields of view."""
    return CameraIntrinsics.from_fov()


def project(intr: CameraIntrinsics, camera_pose: Pose3, point_w) -> np.ndarray:
    """Pixel of a world point; raises BehindCameraError at non-positive depth.

    Out-of-bounds pixels are returned, not raised; use in_image to gate them.
    """
    p = camera_pose.apply(np.asarray(point_w, dtype=float))
    z = p[2]
    if z <= 0.0:
        raise BehindCameraError(f"point at depth {z:.6f}")
    return np.array([intr.fx * p[0] / z + intr.cx, intr.fy * p[1] / z + intr.cy])


def back_project(intr: CameraIntrinsics, camera_pose: Pose3, pixel, depth: float) -> np.ndarray:
    """World point at ``depth`` along the viewing ray of ``pixel``."""
    x = (pixel[0] - intr.cx) / intr.fx * depth
    y = (pixel[1] - intr.cy) / intr.fy * depth
    p_cam = np.array([x, y, depth])
    return camera_pose.R.T @ (p_cam - camera_pose.t)


def in_image(intr: CameraIntrinsics, pixel) -> bool:
    return (0.0 <= pixel[0] <= intr.width) and (0.0 <= pixel[1] <= intr.height)
