"""Serial-chain robots: forward kinematics, geometric Jacobian, damped-least-squares IK.

Everything here is a pure function of its inputs; repeated calls with the
same arguments return bitwise-identical results.
"""

from dataclasses import dataclass, field

import numpy as np

from .configtext import (ConfigError, Section, entry_float, entry_floats,
                         entry_str, entry_word)
from .geometry import (Pose, axis_angle_matrix, matrix_to_quat, quat_conjugate,
                       quat_multiply, quat_to_matrix, quat_to_rotvec)

AXIS_NORM_TOL = 1e-9

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str  # revolute | prismatic
    axis: np.ndarray  # unit 3-vector in the parent link frame
    origin: Pose  # parent link frame -> joint frame
    limit_lo: float
    limit_hi: float
    max_velocity: float  # rad/s or m/s


@dataclass(frozen=True)
class RobotModel:
    name: str
    joints: tuple
    base_pose: Pose
    ee_offset: Pose

    @property
    def n(self) -> int:
        return len(self.joints)

    def check_config(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"joint config length {q.shape} does not match "
                             f"{self.n} joints of {self.name!r}")
        return q

    def limits(self) -> tuple:
        lo = np.array([j.limit_lo for j in self.joints])
        hi = np.array([j.limit_hi for j in self.joints])
        return lo, hi

    def max_velocities(self) -> np.ndarray:
        return np.array([j.max_velocity for j in self.joints])


def load_robot_model(doc: Section) -> RobotModel:
    """Build a validated RobotModel from a parsed robot-spec document.

    Raises ConfigError on schema violations (missing/mistyped fields) and on
    semantic violations (duplicate joint names, empty limit ranges, zero axes,
    non-positive velocity limits).
    """
    path = doc.path
    name = entry_str(doc.require("name"), path)
    base_pose = _read_transform(doc.section("base_pose"), path)
    ee_offset = _read_transform(doc.section("ee_offset"), path)

    joints = []
    seen = set()
    for sec in doc.sections("joint"):
        if len(sec.args) != 1 or not isinstance(sec.args[0], str):
            raise ConfigError("joint section needs a name argument", path, sec.line)
        jname = sec.args[0]
        if jname in seen:
            raise ConfigError(f"duplicate joint name {jname!r}", path, sec.line)
        seen.add(jname)
        kind = entry_word(sec.require("kind"), path, {REVOLUTE, PRISMATIC})
        axis_entry = sec.require("axis")
        axis = np.array(entry_floats(axis_entry, 3, path))
        norm = float(np.linalg.norm(axis))
        if abs(norm - 1.0) > 1e-6:
            if norm == 0.0:
                raise ConfigError(f"joint {jname!r} axis is zero", path, axis_entry.line)
            axis = axis / norm
        else:
            axis = axis / norm
        limit_entry = sec.require("limit")
        lo, hi = entry_floats(limit_entry, 2, path)
        if not lo < hi:
            raise ConfigError(f"joint {jname!r} limit_lo must be < limit_hi",
                              path, limit_entry.line)
        vel_entry = sec.require("max_velocity")
        vel = entry_float(vel_entry, path)
        if not vel > 0:
            raise ConfigError(f"joint {jname!r} max_velocity must be positive",
                              path, vel_entry.line)
        joints.append(JointSpec(name=jname, kind=kind, axis=axis,
                                origin=_read_transform(sec.section("origin"), path),
                                limit_lo=lo, limit_hi=hi, max_velocity=vel))
    if not joints:
        raise ConfigError("robot needs at least one joint section", path, doc.line)
    return RobotModel(name=name, joints=tuple(joints),
                      base_pose=base_pose, ee_offset=ee_offset)


def robot_record(model: RobotModel) -> dict:
    """Plain-data view of a model: served to clients (which run their own FK
    from it) and hashed for the robot digest."""
    return {
        "name": model.name,
        "base_pose": model.base_pose.to_list7(),
        "ee_offset": model.ee_offset.to_list7(),
        "joints": [
            {"name": j.name, "kind": j.kind, "axis": [float(v) for v in j.axis],
             "origin": j.origin.to_list7(), "limit": [j.limit_lo, j.limit_hi],
             "max_velocity": j.max_velocity}
            for j in model.joints
        ],
    }


def _read_transform(sec, path: str) -> Pose:
    if sec is None:
        return Pose.identity()
    xyz = [0.0, 0.0, 0.0]
    rpy = [0.0, 0.0, 0.0]
    if sec.entry("xyz") is not None:
        xyz = entry_floats(sec.entry("xyz"), 3, path)
    if sec.entry("rpy") is not None:
        rpy = entry_floats(sec.entry("rpy"), 3, path)
    return Pose.from_xyz_rpy(xyz, rpy)


def _chain(model: RobotModel, q: np.ndarray):
    """World (R, p) of every joint frame after its motion, plus the end effector."""
    r = quat_to_matrix(model.base_pose.orientation)
    p = model.base_pose.position.copy()
    frames = []
    for spec, qi in zip(model.joints, q):
        p = p + r @ spec.origin.position
        r = r @ quat_to_matrix(spec.origin.orientation)
        if spec.kind == REVOLUTE:
            r = r @ axis_angle_matrix(spec.axis, qi)
        else:
            p = p + r @ (spec.axis * qi)
        frames.append((r, p))
    ee_r = r @ quat_to_matrix(model.ee_offset.orientation)
    ee_p = p + r @ model.ee_offset.position
    return frames, (ee_r, ee_p)


def forward_kinematics(model: RobotModel, q) -> tuple:
    """End-effector pose and per-joint link poses for a joint configuration."""
    q = model.check_config(q)
    frames, (ee_r, ee_p) = _chain(model, q)
    link_poses = [Pose(p, matrix_to_quat(r)) for r, p in frames]
    return Pose(ee_p, matrix_to_quat(ee_r)), link_poses


def fk_pose(model: RobotModel, q) -> Pose:
    q = model.check_config(q)
    _, (ee_r, ee_p) = _chain(model, q)
    return Pose(ee_p, matrix_to_quat(ee_r))


def jacobian(model: RobotModel, q) -> np.ndarray:
    """Geometric Jacobian, 6 x n: linear x,y,z rows then angular x,y,z rows."""
    q = model.check_config(q)
    frames, (_, ee_p) = _chain(model, q)
    jac = np.zeros((6, model.n))
    for i, (spec, (r, p)) in enumerate(zip(model.joints, frames)):
        z = r @ spec.axis
        if spec.kind == REVOLUTE:
            jac[:3, i] = np.cross(z, ee_p - p)
            jac[3:, i] = z
        else:
            jac[:3, i] = z
    return jac


def clamp_to_limits(model: RobotModel, q) -> np.ndarray:
    q = model.check_config(q)
    lo, hi = model.limits()
    return np.clip(q, lo, hi)


@dataclass(frozen=True)
class IkParams:
    damping: float = 0.05
    max_iterations: int = 100
    pos_tol: float = 1e-4  # meters
    rot_tol: float = 1e-3  # radians
    step_scale: float = 1.0
    orientation_weight: float = 1.0  # 0 solves position-only targets

    def validate(self):
        if not (self.damping > 0 and self.max_iterations > 0 and self.pos_tol > 0
                and self.rot_tol > 0 and 0 < self.step_scale <= 1.0):
            raise ValueError("invalid IK parameters")
        if not 0.0 <= self.orientation_weight:
            raise ValueError("orientation_weight must be >= 0")


@dataclass(frozen=True)
class IkResult:
    solution: np.ndarray
    converged: bool
    iterations: int
    residual: np.ndarray = field(repr=False)  # pos error (m) then rot error (rad, axis-angle)


def pose_error(target: Pose, current: Pose, orientation_weight: float = 1.0) -> np.ndarray:
    """6-vector twist error. Orientation part is the axis-angle of
    target o current^-1; zero when orientation is unconstrained (weight 0)."""
    e = np.zeros(6)
    e[:3] = target.position - current.position
    if orientation_weight > 0.0:
        e[3:] = quat_to_rotvec(quat_multiply(target.orientation,
                                             quat_conjugate(current.orientation)))
    return e


# Per-iteration twist-error caps. Near a full-extension singularity the raw
# DLS update overshoots by orders of magnitude; bounding the error magnitude
# bounds the step (|dq| <= cap / (2 * damping)) without changing behavior
# near convergence, where the error is already below the cap.
IK_ERR_CAP_POS = 0.1  # meters
IK_ERR_CAP_ROT = 0.5  # radians


def _clamp_norm(v: np.ndarray, cap: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v * (cap / n) if n > cap else v


def dls_step(model: RobotModel, q: np.ndarray, target: Pose, params: IkParams) -> np.ndarray:
    """One damped-least-squares update: J^T (J J^T + damping^2 I)^-1 e."""
    current = fk_pose(model, q)
    err = pose_error(target, current, params.orientation_weight)
    err[:3] = _clamp_norm(err[:3], IK_ERR_CAP_POS)
    err[3:] = _clamp_norm(err[3:], IK_ERR_CAP_ROT)
    jac = jacobian(model, q)
    w = params.orientation_weight
    if w != 1.0:
        jac = jac.copy()
        jac[3:, :] *= w
        err[3:] *= w
    a = jac @ jac.T + (params.damping ** 2) * np.eye(6)
    return jac.T @ np.linalg.solve(a, err)


def solve_ik_dls(model: RobotModel, target: Pose, seed, params: IkParams | None = None) -> IkResult:
    """Iterate damped-least-squares with per-iteration joint-limit clamping.

    Stops as soon as both tolerances are met; otherwise returns the best
    iterate seen, ranked by weighted residual norm. Deterministic.
    """
    params = params or IkParams()
    params.validate()
    q = model.check_config(seed)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite seed")
    if not np.all(np.isfinite(target.position)):
        raise ValueError("non-finite target")
    w = params.orientation_weight

    def residual_at(qv):
        current = fk_pose(model, qv)
        return pose_error(target, current, w)

    best_q = q
    best_cost = np.inf
    for it in range(params.max_iterations + 1):
        res = residual_at(q)
        pos_norm = float(np.linalg.norm(res[:3]))
        rot_norm = float(np.linalg.norm(res[3:]))
        if pos_norm <= params.pos_tol and (w == 0.0 or rot_norm <= params.rot_tol):
            return IkResult(solution=q, converged=True, iterations=it, residual=res)
        cost = float(np.hypot(pos_norm, w * rot_norm))
        if cost < best_cost:
            best_cost = cost
            best_q = q
        if it == params.max_iterations:
            break
        q = clamp_to_limits(model, q + params.step_scale * dls_step(model, q, target, params))
    return IkResult(solution=best_q, converged=False,
                    iterations=params.max_iterations, residual=residual_at(best_q))


def resolved_rate_step(model: RobotModel, q: np.ndarray, target: Pose,
                       params: IkParams, dt: float) -> np.ndarray:
    """One tracking step toward the target, velocity-clamped, then clamped to
    the joint limits. The whole step is scaled down to honor the tightest
    per-joint velocity cap; clipping joints independently would distort the
    task-space direction."""
    dq = params.step_scale * dls_step(model, q, target, params)
    cap = model.max_velocities() * dt
    over = np.abs(dq) / cap
    worst = float(np.max(over)) if dq.size else 0.0
    if worst > 1.0:
        dq = dq / worst
    return clamp_to_limits(model, q + dq)
