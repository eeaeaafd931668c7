"""Quaternion and 6-DoF pose arithmetic.

Conventions used across the package:

- quaternions are (w, x, y, z), Hamilton product, unit norm, sign
  canonicalized to w >= 0;
- a pose's quaternion is the camera-to-world rotation, ``t`` is the camera
  position in the world frame (meters);
- Euler angles are ZYX intrinsic: yaw about world z, then pitch, then roll
  about the camera's x axis, which is its optical axis.
"""
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np


ROTATION_CLASSES = (0, 90, 180, 270)
GIMBAL_TOLERANCE = 1e-6


class DegenerateQuaternionError(ValueError):
    pass


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Quaternion":
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class Pose:
    t: Tuple[float, float, float]
    q: Quaternion

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if len(self.t) != 3:
            raise ValueError(f"pose position must have 3 components, got {len(self.t)}")
        values = list(self.t) + list(self.q.as_array())
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"pose has non-finite components: {values}")
        if abs(self.q.norm() - 1.0) > 1e-6:
            raise ValueError(f"pose orientation is not a unit quaternion (norm {self.q.norm():.6g})")

    @classmethod
    def identity(cls) -> "Pose":
        return cls((0.0, 0.0, 0.0), Quaternion.identity())

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> "Pose":
        """Build from ``tx ty tz qw qx qy qz``; the quaternion is normalized."""
        values = [float(v) for v in values]
        if len(values) != 7:
            raise ValueError(f"pose vector must have 7 components, got {len(values)}")
        return cls(tuple(values[:3]), quat_normalize(Quaternion.from_array(values[3:])))

    @property
    def position(self) -> np.ndarray:
        return np.array(self.t, dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.q.as_array()])


@dataclass(frozen=True)
class EulerAngles:
    yaw: float
    pitch: float
    roll: float
    gimbal_lock: bool = False


@dataclass(frozen=True)
class ErrorPair:
    position_error: float
    orientation_error: float


QuatLike = Union[Quaternion, Sequence[float], np.ndarray]


def _as_array(q: QuatLike) -> np.ndarray:
    if isinstance(q, Quaternion):
        return q.as_array()
    return np.asarray(q, dtype=np.float64).reshape(4)


def canonical_sign(arr: np.ndarray) -> np.ndarray:
    """Flip to w > 0, or to a positive first nonzero component when w == 0."""
    if arr[0] < 0.0:
        return -arr
    if arr[0] == 0.0:
        nonzero = arr[1:][arr[1:] != 0.0]
        if nonzero.size and nonzero[0] < 0.0:
            return -arr
    return arr


def canonicalize_array(qs: np.ndarray) -> np.ndarray:
    """Unit-normalize rows of an (n, 4) array and flip them to w >= 0."""
    qs = np.asarray(qs, dtype=np.float64)
    norms = np.linalg.norm(qs, axis=-1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DegenerateQuaternionError("degenerate quaternion")
    qs = qs / norms
    return np.where(qs[..., :1] < 0.0, -qs, qs)


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - angle) % (2.0 * math.pi)


def quat_normalize(q: QuatLike) -> Quaternion:
    arr = _as_array(q)
    norm = float(np.linalg.norm(arr))
    if not math.isfinite(norm) or norm <= 1e-12:
        raise DegenerateQuaternionError("degenerate quaternion")
    return Quaternion.from_array(canonical_sign(arr / norm))


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_multiply(a: QuatLike, b: QuatLike) -> Quaternion:
    """Hamilton product ``a * b``: rotates by ``b`` first, then by ``a``."""
    return quat_normalize(_hamilton(_as_array(a), _as_array(b)))


def quat_inverse(q: QuatLike) -> Quaternion:
    arr = _as_array(q)
    return quat_normalize(np.array([arr[0], -arr[1], -arr[2], -arr[3]]))


def _rotation_matrix(q: QuatLike) -> np.ndarray:
    w, x, y, z = _as_array(q) / np.linalg.norm(_as_array(q))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotate_vector(q: QuatLike, v: Sequence[float]) -> np.ndarray:
    return _rotation_matrix(q) @ np.asarray(v, dtype=np.float64)


def euler_to_quat(e: EulerAngles) -> Quaternion:
    cy, sy = math.cos(e.yaw / 2), math.sin(e.yaw / 2)
    cp, sp = math.cos(e.pitch / 2), math.sin(e.pitch / 2)
    cr, sr = math.cos(e.roll / 2), math.sin(e.roll / 2)
    return quat_normalize([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])


def quat_to_euler(q: QuatLike) -> EulerAngles:
    """ZYX decomposition. Near |pitch| = pi/2 roll is set to 0 and the flag is raised."""
    w, x, y, z = quat_normalize(q).as_array()
    sin_pitch = max(-1.0, min(1.0, 2.0 * (w * y - z * x)))
    pitch = math.asin(sin_pitch)
    if math.pi / 2 - abs(pitch) < GIMBAL_TOLERANCE:
        # only yaw - roll (or yaw + roll) is observable; put it all in yaw
        yaw = wrap_angle(2.0 * math.atan2(z, w))
        return EulerAngles(yaw, math.copysign(math.pi / 2, pitch), 0.0, gimbal_lock=True)
    roll = math.atan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    yaw = math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return EulerAngles(wrap_angle(yaw), pitch, wrap_angle(roll))


def apply_image_rotation_to_pose(p: Pose, k: int) -> Pose:
    """Pose of the image rotated clockwise by ``k`` degrees: roll grows by k, t is kept."""
    if k not in ROTATION_CLASSES:
        raise ValueError(f"rotation must be one of {ROTATION_CLASSES}, got {k!r}")
    if k == 0:
        return p
    e = quat_to_euler(p.q)
    rolled = EulerAngles(e.yaw, e.pitch, wrap_angle(e.roll + math.radians(k)))
    return Pose(p.t, euler_to_quat(rolled))


def relative_pose(p_i: Pose, p_j: Pose) -> Pose:
    """Pose of j expressed in the camera frame of i."""
    q_rel = quat_multiply(quat_inverse(p_i.q), p_j.q)
    t_rel = _rotation_matrix(p_i.q).T @ (p_j.position - p_i.position)
    return Pose(tuple(t_rel), q_rel)


def compose_pose(a: Pose, b: Pose) -> Pose:
    """Apply relative pose ``b`` in the frame of ``a``; inverts :func:`relative_pose`."""
    t = a.position + _rotation_matrix(a.q) @ b.position
    return Pose(tuple(t), quat_multiply(a.q, b.q))


def quat_angular_distance(a: QuatLike, b: QuatLike) -> float:
    """Geodesic angle 2*arccos(|<a, b>|) in degrees, evaluated through atan2."""
    qa = _as_array(a) / np.linalg.norm(_as_array(a))
    qb = _as_array(b) / np.linalg.norm(_as_array(b))
    conj_a = np.array([qa[0], -qa[1], -qa[2], -qa[3]])
    delta = _hamilton(conj_a, qb)
    cos_half = abs(float(np.clip(np.dot(qa, qb), -1.0, 1.0)))
    sin_half = float(np.linalg.norm(delta[1:]))
    return math.degrees(2.0 * math.atan2(sin_half, cos_half))


def pose_errors(pairs: Iterable[Tuple[Pose, Pose]]) -> Tuple[np.ndarray, np.ndarray]:
    position, orientation = [], []
    for predicted, truth in pairs:
        position.append(float(np.linalg.norm(predicted.position - truth.position)))
        orientation.append(quat_angular_distance(predicted.q, truth.q))
    return np.array(position), np.array(orientation)


def median_errors(pairs: Iterable[Tuple[Pose, Pose]]) -> ErrorPair:
    position, orientation = pose_errors(pairs)
    if position.size == 0:
        raise ValueError("median_errors needs at least one (predicted, ground truth) pair")
    return ErrorPair(float(np.median(position)), float(np.median(orientation)))


def errors_from_arrays(position: Sequence[float], orientation: Sequence[float]) -> ErrorPair:
    position = np.asarray(position, dtype=np.float64)
    if position.size == 0:
        raise ValueError("median_errors needs at least one (predicted, ground truth) pair")
    return ErrorPair(float(np.median(position)), float(np.median(np.asarray(orientation, dtype=np.float64))))


def poses_to_array(poses: Iterable[Pose]) -> np.ndarray:
    rows: List[np.ndarray] = [p.as_vector() for p in poses]
    return np.array(rows).reshape(-1, 7)


def world_to_camera(p: Pose, points: np.ndarray) -> np.ndarray:
    """Express world points (n, 3) in the camera frame of ``p``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return (points - p.position) @ _rotation_matrix(p.q)
