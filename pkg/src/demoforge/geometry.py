"""Rigid-transform primitives: unit quaternions (w, x, y, z) and poses."""

import math
from dataclasses import dataclass

import numpy as np

QUAT_INPUT_TOL = 1e-6  # accepted deviation from unit norm on construction


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is >= 0 (first nonzero component positive at w=0)."""
    if q[0] < 0:
        return -q
    if q[0] == 0:
        for c in q[1:]:
            if c != 0:
                return q if c > 0 else -q
    return q


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError("quaternion must have 4 components")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or abs(n - 1.0) > QUAT_INPUT_TOL:
        raise ValueError(f"quaternion norm {n} not within {QUAT_INPUT_TOL} of 1")
    return canonical_quat(q / n)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion, numerically stable for all branches."""
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return canonical_quat(q / np.linalg.norm(q))


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic X-Y-Z rotation: Rx(roll) @ Ry(pitch) @ Rz(yaw)."""
    rx = axis_angle_matrix(np.array([1.0, 0.0, 0.0]), roll)
    ry = axis_angle_matrix(np.array([0.0, 1.0, 0.0]), pitch)
    rz = axis_angle_matrix(np.array([0.0, 0.0, 1.0]), yaw)
    return rx @ ry @ rz


def rpy_quat(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return matrix_to_quat(rpy_matrix(roll, pitch, yaw))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector of a unit quaternion; angle in [0, pi]."""
    q = canonical_quat(q)
    vec = q[1:]
    nv = np.linalg.norm(vec)
    if nv < 1e-12:
        return 2.0 * vec
    angle = 2.0 * math.atan2(nv, q[0])
    return vec * (angle / nv)


@dataclass(frozen=True)
class Pose:
    """Position (m) plus unit quaternion orientation, canonical sign, world-agnostic."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (3,):
            raise ValueError("position must have 3 components")
        if not np.all(np.isfinite(p)):
            raise ValueError("position must be finite")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", normalize_quat(self.orientation))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_xyz_rpy(xyz, rpy) -> "Pose":
        return Pose(np.asarray(xyz, dtype=float), rpy_quat(*rpy))

    @staticmethod
    def from_list7(values) -> "Pose":
        v = [float(x) for x in values]
        if len(v) != 7:
            raise ValueError("pose needs 7 values: x y z qw qx qy qz")
        return Pose(np.array(v[:3]), np.array(v[3:]))

    def to_list7(self) -> list:
        return [float(v) for v in (*self.position, *self.orientation)]

    def compose(self, other: "Pose") -> "Pose":
        r = quat_to_matrix(self.orientation)
        return Pose(self.position + r @ other.position,
                    quat_multiply(self.orientation, other.orientation))

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.orientation)
        return Pose(-(quat_to_matrix(qc) @ self.position), qc)
