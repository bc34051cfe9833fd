"""Rigid-body geometry and the pinhole camera model.

Poses map points from the point-cloud frame into the camera frame:
``x_cam = R @ x_cloud + t``.  The camera looks down +z, with +x to the right
and +y downwards in the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_DEPTH = 1e-6
_ORTHO_TOL = 1e-9


class PointBehindCameraError(ValueError):
    """Raised when projecting a point whose depth is not positive."""


def _check_rotation(m: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {m.shape}")
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
        raise ValueError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise ValueError("rotation matrix must have det = +1")
    return m


def is_rotation(m: np.ndarray, tol: float = _ORTHO_TOL) -> bool:
    try:
        _check_rotation(m, tol)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the point-cloud frame to the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _check_rotation(self.rotation).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise ValueError(f"point cloud must be N x 3 with N >= 1, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


# -- elementary rotations -------------------------------------------------

def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(w: np.ndarray) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector (radians)."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    k = skew(w)
    if theta2 < 1e-16:
        # second-order Taylor expansion
        return np.eye(3) + k + 0.5 * (k @ k)
    theta = np.sqrt(theta2)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        m = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / np.sqrt(m[i, i])
        return axis / np.linalg.norm(axis) * theta
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return v / (2.0 * np.sin(theta)) * theta


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, degrees."""
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.rad2deg(np.arccos(cos_theta)))


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (orthogonal polar factor with det = +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


# -- Euler angles (intrinsic ZYX: R = Rz(yaw) Ry(pitch) Rx(roll)) ----------

def _wrap_deg(a: float) -> float:
    a = (a + 180.0) % 360.0 - 180.0
    return 180.0 if a == -180.0 else a


def euler_zyx(r: np.ndarray) -> np.ndarray:
    """Return (roll, pitch, yaw) in degrees, each in (-180, 180].

    At gimbal lock (|pitch| = 90) roll is set to 0 and the whole rotation about
    the vertical is reported as yaw.
    """
    r = _check_rotation(r, tol=1e-6)
    pitch = np.arctan2(-r[2, 0], np.hypot(r[0, 0], r[1, 0]))
    if np.hypot(r[0, 0], r[1, 0]) < 1e-12:
        roll = 0.0
        # R = Rz(yaw) Ry(+-90): r01 = -sin(yaw), r11 = cos(yaw)
        yaw = np.arctan2(-r[0, 1], r[1, 1])
    else:
        roll = np.arctan2(r[2, 1], r[2, 2])
        yaw = np.arctan2(r[1, 0], r[0, 0])
    return np.array([_wrap_deg(np.rad2deg(roll)), _wrap_deg(np.rad2deg(pitch)),
                     _wrap_deg(np.rad2deg(yaw))])


def from_euler_zyx(angles_deg) -> np.ndarray:
    roll, pitch, yaw = angles_deg
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


# -- pose algebra ---------------------------------------------------------

def transform(pose: Pose, p: np.ndarray) -> np.ndarray:
    """Apply ``R p + t`` to one point (3,) or many (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt.copy(), -rt @ a.translation)


def random_pose(rng_seed, max_rotation_deg: float, max_translation: float) -> Pose:
    """Random pose with geodesic angle <= max_rotation_deg.

    The axis is uniform on the sphere and the angle uniform in
    ``[0, max_rotation_deg]``; the translation is uniform in the cube
    ``[-max_translation, max_translation]^3``.
    """
    if max_rotation_deg < 0 or max_translation < 0:
        raise ValueError("pose bounds must be non-negative")
    rng = np.random.default_rng(rng_seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_rotation_deg))
    t = rng.uniform(-max_translation, max_translation, size=3)
    if angle == 0.0:
        return Pose(np.eye(3), t)
    return Pose(orthonormalize(axis_angle_to_matrix(axis * angle)), t)


# -- camera ---------------------------------------------------------------

def project(p: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to pixel coordinates."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= EPS_DEPTH):
        raise PointBehindCameraError(f"depth {np.min(z):.3g} <= {EPS_DEPTH}")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def project_points(points: np.ndarray, pose: Pose, k: CameraIntrinsics):
    """Project cloud-frame points; returns (pixels, depth, in_front mask).

    Points with depth <= EPS_DEPTH get NaN pixels instead of raising.
    """
    cam = transform(pose, points)
    z = cam[:, 2]
    front = z > EPS_DEPTH
    uv = np.full((len(cam), 2), np.nan)
    uv[front] = project(cam[front], k)
    return uv, z, front


def unproject(pixel: np.ndarray, k: CameraIntrinsics, depth: float = 1.0) -> np.ndarray:
    u, v = pixel
    return depth * np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])


def cell_of(pixels: np.ndarray, k: CameraIntrinsics):
    """Integer cell (col, row) containing each pixel and an in-image mask."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ok = np.all(np.isfinite(pixels), axis=-1)
    cols = np.full(pixels.shape[:-1], -1, dtype=np.int64)
    rows = np.full(pixels.shape[:-1], -1, dtype=np.int64)
    cols[ok] = np.floor(pixels[ok, 0]).astype(np.int64)
    rows[ok] = np.floor(pixels[ok, 1]).astype(np.int64)
    inside = ok & (cols >= 0) & (cols < k.width) & (rows >= 0) & (rows < k.height)
    return cols, rows, inside


def cell_center(col, row) -> np.ndarray:
    return np.stack([np.asarray(col, dtype=np.float64) + 0.5,
                     np.asarray(row, dtype=np.float64) + 0.5], axis=-1)
