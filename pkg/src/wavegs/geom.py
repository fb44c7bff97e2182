"""SE(3) poses, pinhole cameras, and projective covariance math.

Conventions used throughout the package:
  * quaternions are (w, x, y, z), unit norm
  * a Pose maps points from its source frame into its target frame,
    x_target = R x_source + t
  * camera frame is x right, y down, z forward (pinhole, no distortion)
  * world frame is z-up unless a manifest says otherwise
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

_QUAT_NORM_TOL = 1e-9


def normalize_quaternion(q: Array) -> Array:
    """Return q / ||q||, broadcasting over leading axes. Rejects zero norm."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(q)) or np.any(norm < 1e-12):
        raise ValueError("quaternion must be finite with nonzero norm")
    return q / norm


def quat_multiply(p: Array, q: Array) -> Array:
    """Hamilton product p * q for (..., 4) arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_conjugate(q: Array) -> Array:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_left_matrix(p: Array) -> Array:
    """4x4 matrix L(p) with quat_multiply(p, q) == L(p) @ q."""
    w, x, y, z = np.asarray(p, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_right_matrix(q: Array) -> Array:
    """4x4 matrix R(q) with quat_multiply(p, q) == R(q) @ p."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def quat_to_matrix(q: Array) -> Array:
    """Rotation matrices for unit quaternions, (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    rot[..., 0, 1] = 2.0 * (xy - wz)
    rot[..., 0, 2] = 2.0 * (xz + wy)
    rot[..., 1, 0] = 2.0 * (xy + wz)
    rot[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    rot[..., 1, 2] = 2.0 * (yz - wx)
    rot[..., 2, 0] = 2.0 * (xz - wy)
    rot[..., 2, 1] = 2.0 * (yz + wx)
    rot[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return rot


def quat_to_matrix_jacobian(q: Array) -> Array:
    """d(quat_to_matrix)/dq at unit q, shape (..., 4, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    jac = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    jac[..., 0, :, :] = mat(
        [[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]]
    )
    jac[..., 1, :, :] = mat(
        [[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]]
    )
    jac[..., 2, :, :] = mat(
        [[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]]
    )
    jac[..., 3, :, :] = mat(
        [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]]
    )
    return jac


def quat_rotate(q: Array, v: Array) -> Array:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    rot = quat_to_matrix(q)
    return np.einsum("...ij,...j->...i", rot, np.asarray(v, dtype=np.float64))


def matrix_to_quat(rot: Array) -> Array:
    """Unit quaternion (w, x, y, z) for one 3x3 rotation matrix."""
    rot = np.asarray(rot, dtype=np.float64)
    trace = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if trace > 0.0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = np.array(
            [
                0.25 * s,
                (rot[2, 1] - rot[1, 2]) / s,
                (rot[0, 2] - rot[2, 0]) / s,
                (rot[1, 0] - rot[0, 1]) / s,
            ]
        )
    else:
        i = int(np.argmax([rot[0, 0], rot[1, 1], rot[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(rot[i, i] - rot[j, j] - rot[k, k] + 1.0, 0.0))
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    return normalize_quaternion(q)


def quat_from_axis_angle(axis: Array, angle: float) -> Array:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_exp(rotvec: Array) -> Array:
    """Unit quaternion for a rotation vector (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec)
    half = 0.5 * angle
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        return normalize_quaternion(
            np.concatenate([[1.0 - half * half / 2.0], 0.5 * rotvec])
        )
    return np.concatenate([[np.cos(half)], (np.sin(half) / angle) * rotvec])


def quat_exp_jacobian(rotvec: Array) -> Array:
    """d(quat_exp)/d(rotvec), shape (4, 3)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec)
    jac = np.zeros((4, 3))
    if angle < 1e-8:
        jac[0] = -0.25 * rotvec
        jac[1:] = 0.5 * np.eye(3) - (rotvec[:, None] * rotvec[None, :]) / 24.0
        return jac
    half = 0.5 * angle
    s, c = np.sin(half), np.cos(half)
    n = rotvec / angle
    jac[0] = -0.5 * s * n
    jac[1:] = (s / angle) * np.eye(3) + (0.5 * c / angle - s / (angle * angle)) * (
        n[:, None] * rotvec[None, :]
    )
    return jac


def quat_slerp(q0: Array, q1: Array, u: float) -> Array:
    """Spherical linear interpolation, shortest arc."""
    q0 = normalize_quaternion(q0)
    q1 = normalize_quaternion(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-10:
        return normalize_quaternion(q0 + u * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1.0 - u) * theta) / s) * q0 + (np.sin(u * theta) / s) * q1


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_target = R(rotation) x_source + translation."""

    rotation: Array
    translation: Array

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("pose components must be finite")
        norm = np.linalg.norm(rot)
        if norm < 1e-12:
            raise ValueError("zero-norm quaternion")
        if abs(norm - 1.0) > _QUAT_NORM_TOL:
            rot = rot / norm
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> Array:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> Array:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation_matrix()
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        rot = quat_multiply(self.rotation, other.rotation)
        trans = quat_rotate(self.rotation, other.translation) + self.translation
        return Pose(normalize_quaternion(rot), trans)

    def inverse(self) -> "Pose":
        rot = quat_conjugate(self.rotation)
        return Pose(rot, -quat_rotate(rot, self.translation))

    def apply(self, points: Array) -> Array:
        """Transform one point (3,) or a batch (n, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics. Pixel (u, v) = (fx x/z + cx, fy y/z + cy)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 1000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")


@dataclass(frozen=True)
class BoundingBox3D:
    """Oriented box: center, size (length, width, height), yaw about +z."""

    center: Array
    size: Array
    yaw: float = 0.0

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(size <= 0):
            raise ValueError("box size components must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", float(self.yaw))

    def pose(self) -> Pose:
        """Box frame -> parent frame."""
        return Pose(quat_from_axis_angle([0.0, 0.0, 1.0], self.yaw), self.center)

    def contains(self, points: Array, margin: float = 0.0) -> Array:
        """Boolean mask of points (n, 3) inside the box inflated by `margin`
        (fractional, e.g. 0.1 adds 10% to every dimension). Closed test."""
        local = self.pose().inverse().apply(np.atleast_2d(points))
        half = 0.5 * self.size * (1.0 + margin)
        return np.all(np.abs(local) <= half, axis=1)

    def corners(self) -> Array:
        """(8, 3) corner coordinates in the parent frame."""
        half = 0.5 * self.size
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.pose().apply(signs * half)


def build_covariance(rotation: Array, scale: Array) -> Array:
    """World covariance of an anisotropic Gaussian, R diag(s)^2 R^T.

    `rotation` is a unit quaternion (or batch), `scale` the per-axis
    standard deviations (positive). Supports (4,)/(3,) or (n,4)/(n,3).
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise ValueError("non-finite inputs")
    if np.any(scale <= 0):
        raise ValueError("scale components must be positive")
    rot = quat_to_matrix(normalize_quaternion(rotation))
    scaled = rot * scale[..., None, :] ** 2          # R @ diag(s^2)
    return scaled @ np.swapaxes(rot, -1, -2)


def project_point(p_cam: Array, cam: CameraModel):
    """Project one camera-frame point. Returns (pixel (2,), depth) or None
    when the point lies behind the near plane (culled, not a fault)."""
    p_cam = np.asarray(p_cam, dtype=np.float64).reshape(3)
    z = p_cam[2]
    if not z > cam.near:
        return None
    pixel = np.array(
        [cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy]
    )
    return pixel, float(z)


def unproject_point(pixel: Array, depth: float, cam: CameraModel) -> Array:
    """Inverse of project_point at known depth."""
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    z = float(depth)
    return np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])


def projection_jacobian(p_cam: Array, cam: CameraModel) -> Array:
    """Jacobian of the pinhole projection at p_cam. (..., 3) -> (..., 2, 3)."""
    p = np.asarray(p_cam, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    jac = np.zeros(p.shape[:-1] + (2, 3), dtype=np.float64)
    jac[..., 0, 0] = cam.fx / z
    jac[..., 0, 2] = -cam.fx * x / (z * z)
    jac[..., 1, 1] = cam.fy / z
    jac[..., 1, 2] = -cam.fy * y / (z * z)
    return jac


def camera_covariance(
    cov_world: Array,
    p_cam: Array,
    view: Pose,
    cam: CameraModel,
    dilation: float = 0.3,
) -> Array:
    """Screen-space 2x2 covariance of a world-frame Gaussian.

    Affine (EWA) approximation: J W Σ W^T J^T with J the projection
    Jacobian at the camera-frame mean and W the world-to-camera rotation,
    plus an isotropic `dilation` (px^2) on the diagonal as a low-pass
    guarantee. The dilation keeps degenerate inputs SPD, never a fault.
    """
    p_cam = np.asarray(p_cam, dtype=np.float64).reshape(3)
    if not p_cam[2] > cam.near:
        raise ValueError("point behind near plane")
    jw = projection_jacobian(p_cam, cam) @ view.rotation_matrix()
    cov2d = jw @ np.asarray(cov_world, dtype=np.float64) @ jw.T
    return cov2d + dilation * np.eye(2)
