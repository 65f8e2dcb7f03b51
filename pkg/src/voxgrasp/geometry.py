"""Rigid-body math, the five-keypoint parallel gripper, and grasp orientation sampling.

Quaternions are stored as ``(w, x, y, z)``.  A grasp frame has its origin at the
midpoint between the finger bases, ``+z`` along the approach direction and
``+x`` along the closing direction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if abs(n - 1.0) > _NORM_TOL:
            raise DomainError(f"quaternion norm {n} is not 1")

    @classmethod
    def normalized(cls, w, x, y, z) -> UnitQuaternion:
        v = np.array([w, x, y, z], dtype=np.float64)
        n = float(np.linalg.norm(v))
        if n < 1e-12:
            raise DomainError("cannot normalize a zero quaternion")
        v = v / n
        return cls(*(float(c) for c in v))

    @classmethod
    def identity(cls) -> UnitQuaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> UnitQuaternion:
        a = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise DomainError("rotation axis has zero length")
        a = a / n
        s = math.sin(angle / 2.0)
        return cls.normalized(math.cos(angle / 2.0), a[0] * s, a[1] * s, a[2] * s)

    @classmethod
    def from_matrix(cls, m) -> UnitQuaternion:
        return cls.normalized(*matrix_to_quat(np.asarray(m, dtype=np.float64)))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())

    def conjugate(self) -> UnitQuaternion:
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: UnitQuaternion) -> UnitQuaternion:
        return UnitQuaternion.normalized(*quat_multiply(self.as_array(), other.as_array()))

    def canonical(self) -> UnitQuaternion:
        """Sign representative with w >= 0 (ties resolved on x, then y, then z)."""
        return UnitQuaternion(*(float(c) for c in canonicalize(self.as_array())))


@dataclass(frozen=True)
class Pose:
    rotation: UnitQuaternion
    translation: tuple

    def __post_init__(self):
        t = tuple(float(c) for c in self.translation)
        if len(t) != 3:
            raise DomainError("translation must have three components")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(UnitQuaternion.identity(), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, rotation, translation) -> Pose:
        return cls(UnitQuaternion.from_matrix(rotation), tuple(np.asarray(translation, dtype=float)))

    def __mul__(self, other: Pose) -> Pose:
        """Composition ``self ∘ other``: apply ``other`` first."""
        r = self.rotation * other.rotation
        t = rotate(self.rotation, other.translation) + np.asarray(self.translation)
        return Pose(r, tuple(t))

    def inverse(self) -> Pose:
        rinv = self.rotation.conjugate()
        t = -rotate(rinv, self.translation)
        return Pose(rinv, tuple(t))

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)`` from this frame into the parent frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.as_matrix().T + np.asarray(self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class GripperModel:
    max_width: float = 0.08
    finger_depth: float = 0.05

    def __post_init__(self):
        if not self.max_width > 0 or not self.finger_depth > 0:
            raise DomainError("gripper dimensions must be positive")

    def local_keypoints(self, width: float) -> np.ndarray:
        """Wrist, two finger bases, two fingertips in the grasp frame, shape (5, 3)."""
        h = width / 2.0
        d = self.finger_depth
        return np.array(
            [
                [0.0, 0.0, -d / 2.0],
                [h, 0.0, 0.0],
                [-h, 0.0, 0.0],
                [h, 0.0, d],
                [-h, 0.0, d],
            ]
        )


# -- array helpers (broadcast over leading axes) ---------------------------------


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` to canonical quaternions ``(..., 4)``."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif r[1, 1] > r[2, 2]:
            s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = canonicalize(q / np.linalg.norm(q))
    return out.reshape(m.shape[:-2] + (4,))


def canonicalize(q) -> np.ndarray:
    """Flip quaternion signs so the first nonzero of (w, x, y, z) is positive."""
    q = np.array(q, dtype=np.float64)
    flat = q.reshape(-1, 4)
    for row in flat:
        for c in row:
            if c != 0.0:
                if c < 0.0:
                    row *= -1.0
                break
    return flat.reshape(q.shape) + 0.0  # drop negative zeros


def roll_pi() -> UnitQuaternion:
    """Half turn about the approach axis; maps a grasp onto its finger-swapped twin."""
    return UnitQuaternion(0.0, 0.0, 0.0, 1.0)


# -- operations -----------------------------------------------------------------


def rotate(q: UnitQuaternion, v) -> np.ndarray:
    return quat_to_matrix(q.as_array()) @ np.asarray(v, dtype=np.float64)


def gripper_keypoints(pose: Pose, width: float, model: GripperModel) -> np.ndarray:
    if not 0.0 <= width <= model.max_width:
        raise DomainError(f"width {width} outside [0, {model.max_width}]")
    return pose.apply(model.local_keypoints(width))


def semicircle_orientations(normal, count: int) -> list[UnitQuaternion]:
    """Grasp frames approaching against ``normal`` at ``count`` rolls spread over π."""
    if count < 1:
        raise DomainError("count must be >= 1")
    return [UnitQuaternion(*(float(c) for c in q)) for q in semicircle_quats(normal, count)]


def semicircle_frames(normal, count: int) -> np.ndarray:
    """Rotation matrices ``(count, 3, 3)`` behind :func:`semicircle_orientations`."""
    n = np.asarray(normal, dtype=np.float64)
    length = np.linalg.norm(n)
    if length < 1e-12:
        raise DomainError("normal has zero length")
    n = n / length
    approach = -n
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) <= 0.99 else np.array([0.0, 1.0, 0.0])
    t0 = ref - np.dot(ref, n) * n
    t0 /= np.linalg.norm(t0)
    t1 = np.cross(approach, t0)
    frames = np.empty((count, 3, 3))
    for k in range(count):
        theta = k * math.pi / count
        x = math.cos(theta) * t0 + math.sin(theta) * t1
        y = np.cross(approach, x)
        frames[k] = np.column_stack([x, y, approach])
    return frames


def semicircle_quats(normal, count: int) -> np.ndarray:
    return matrix_to_quat(semicircle_frames(normal, count))


def random_rotation(rng: np.random.Generator) -> UnitQuaternion:
    """Uniformly distributed rotation."""
    q = rng.normal(size=4)
    return UnitQuaternion.normalized(*canonicalize(q / np.linalg.norm(q)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose for an optical frame (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose.from_matrix(np.column_stack([right, down, forward]), eye)
