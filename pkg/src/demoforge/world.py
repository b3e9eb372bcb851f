"""Deterministic fixed-timestep world: an IK-tracked arm, free objects, proximity grasping.

The world advances only through step(); a step is a pure function of the
prior state, so identical command-at-tick schedules reproduce identical
frame streams bit for bit. There are no dynamics: free objects are static,
a grasped object rigidly follows the gripper.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .canonical import canonical_digest
from .configtext import (ConfigError, Section, entry_bool, entry_float,
                         entry_floats, entry_str, entry_word)
from .geometry import Pose, rpy_quat, quat_multiply
from .kinematics import IkParams, RobotModel, fk_pose, resolved_rate_step
from . import protocol

TICK_RATE = 60  # ticks per second; dt is exactly 1/60 s
DT = 1.0 / TICK_RATE
GRASP_RADIUS = 0.05  # meters, gripper center to object center

GRIPPER_OPEN = "open"
GRIPPER_CLOSED = "closed"


def sim_time(tick: int) -> float:
    """Seconds at a tick, computed as tick / rate so time never drifts."""
    return tick / TICK_RATE


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    shape: str  # box | sphere
    dims: tuple  # box: (x, y, z); sphere: (radius,)
    initial_pose: Pose
    graspable: bool


@dataclass(frozen=True)
class SceneSpec:
    name: str
    robot: str  # robot model name in the catalog
    robot_initial: tuple
    objects: tuple
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    task_prompt: str | None = None
    orientation_weight: float = 1.0

    def object(self, oid: str) -> ObjectSpec:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise KeyError(oid)

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "robot": self.robot,
            "robot_initial": [float(v) for v in self.robot_initial],
            "objects": [
                {"id": o.id, "shape": o.shape, "dims": [float(d) for d in o.dims],
                 "pose": o.initial_pose.to_list7(), "graspable": o.graspable}
                for o in self.objects
            ],
            "bounds": {"min": [float(v) for v in self.bounds_min],
                       "max": [float(v) for v in self.bounds_max]},
            "task_prompt": self.task_prompt,
            "orientation_weight": float(self.orientation_weight),
        }

    def digest(self) -> str:
        return canonical_digest(self.to_record())


def parse_scene(doc: Section) -> SceneSpec:
    """Read a scene document; raises ConfigError on schema/semantic violations."""
    path = doc.path
    name = entry_str(doc.require("name"), path)
    robot = entry_str(doc.require("robot"), path)
    initial = tuple(entry_floats(doc.require("robot_initial"), None, path))
    prompt = None
    if doc.entry("task_prompt") is not None:
        prompt = entry_str(doc.entry("task_prompt"), path)
    weight = 1.0
    if doc.entry("orientation_weight") is not None:
        weight = entry_float(doc.entry("orientation_weight"), path)
        if weight < 0:
            raise doc.error("orientation_weight must be >= 0",
                            doc.entry("orientation_weight").line)

    bounds = doc.section("workspace_bounds")
    if bounds is None:
        raise doc.error("missing workspace_bounds section")
    bmin = np.array(entry_floats(bounds.require("min"), 3, path))
    bmax = np.array(entry_floats(bounds.require("max"), 3, path))
    if not np.all(bmin < bmax):
        raise ConfigError("workspace bounds min must be < max per axis", path, bounds.line)

    objects = []
    seen = set()
    for sec in doc.sections("object"):
        if len(sec.args) != 1 or not isinstance(sec.args[0], str):
            raise ConfigError("object section needs an id argument", path, sec.line)
        oid = sec.args[0]
        if oid in seen:
            raise ConfigError(f"duplicate object id {oid!r}", path, sec.line)
        seen.add(oid)
        shape = entry_word(sec.require("shape"), path, {"box", "sphere"})
        size_entry = sec.require("size")
        dims = tuple(entry_floats(size_entry, 3 if shape == "box" else 1, path))
        if not all(d > 0 for d in dims):
            raise ConfigError(f"object {oid!r} dimensions must be positive",
                              path, size_entry.line)
        position = entry_floats(sec.require("position"), 3, path)
        rpy = [0.0, 0.0, 0.0]
        if sec.entry("rpy") is not None:
            rpy = entry_floats(sec.entry("rpy"), 3, path)
        graspable = False
        if sec.entry("graspable") is not None:
            graspable = entry_bool(sec.entry("graspable"), path)
        objects.append(ObjectSpec(id=oid, shape=shape, dims=dims,
                                  initial_pose=Pose(np.array(position), rpy_quat(*rpy)),
                                  graspable=graspable))
    return SceneSpec(name=name, robot=robot, robot_initial=initial,
                     objects=tuple(objects), bounds_min=bmin, bounds_max=bmax,
                     task_prompt=prompt, orientation_weight=weight)


@dataclass
class WorldState:
    tick: int
    joint_config: np.ndarray
    ee_target: Pose
    gripper: str
    gripper_target: str  # desired state set by teleop, resolved by step
    grasped_object: str | None
    grasp_offset: Pose | None  # gripper -> object, captured at grasp time
    object_poses: dict  # id -> Pose

    @property
    def sim_time(self) -> float:
        return sim_time(self.tick)


@dataclass(frozen=True)
class SimFrame:
    """One streamed/logged snapshot; plain-python fields so frames compare
    and encode exactly."""
    tick: int
    time: float
    seq: int
    joint_config: tuple
    ee: tuple
    gripper: str
    grasped_object: str | None
    object_poses: dict  # id -> 7-tuple

    def to_message(self) -> protocol.StateFrameMsg:
        return protocol.StateFrameMsg(tick=self.tick, time=self.time, seq=self.seq,
                                      q=self.joint_config, ee=self.ee,
                                      gripper=self.gripper, grasped=self.grasped_object,
                                      objects=self.object_poses)

    @staticmethod
    def from_message(m: protocol.StateFrameMsg) -> "SimFrame":
        return SimFrame(tick=m.tick, time=m.time, seq=m.seq, joint_config=m.q,
                        ee=m.ee, gripper=m.gripper, grasped_object=m.grasped,
                        object_poses=dict(m.objects))


class SceneError(Exception):
    """Semantic violation when instantiating a scene against a robot model."""


class World:
    """Owns one WorldState; single-writer (one session loop or one replay)."""

    def __init__(self, scene: SceneSpec, model: RobotModel, dt: float = DT):
        self.scene = scene
        self.model = model
        self.dt = dt
        self.ik = IkParams(orientation_weight=scene.orientation_weight)
        self.state = self._initial_state()

    def _initial_state(self) -> WorldState:
        model, scene = self.model, self.scene
        q0 = model.check_config(scene.robot_initial)
        lo, hi = model.limits()
        if np.any(q0 < lo) or np.any(q0 > hi):
            raise SceneError(f"robot_initial outside joint limits of {model.name!r}")
        ee0 = fk_pose(model, q0)
        if not self._in_bounds(ee0.position):
            raise SceneError("initial end-effector pose outside workspace bounds")
        poses = {}
        for obj in scene.objects:
            if not self._in_bounds(obj.initial_pose.position):
                raise SceneError(f"object {obj.id!r} initial pose outside workspace bounds")
            poses[obj.id] = obj.initial_pose
        return WorldState(tick=0, joint_config=q0, ee_target=ee0,
                          gripper=GRIPPER_OPEN, gripper_target=GRIPPER_OPEN,
                          grasped_object=None, grasp_offset=None, object_poses=poses)

    def _in_bounds(self, p: np.ndarray) -> bool:
        return bool(np.all(p >= self.scene.bounds_min) and np.all(p <= self.scene.bounds_max))

    def _clamp_bounds(self, p: np.ndarray) -> np.ndarray:
        return np.clip(p, self.scene.bounds_min, self.scene.bounds_max)

    # -- commands -----------------------------------------------------------

    def apply_teleop(self, cmd) -> None:
        """Move the end-effector target or set the desired gripper state.
        Joints move only when the world steps."""
        st = self.state
        if isinstance(cmd, protocol.EeDelta):
            pos = self._clamp_bounds(st.ee_target.position + np.array([cmd.dx, cmd.dy, cmd.dz]))
            quat = st.ee_target.orientation
            if cmd.droll or cmd.dpitch or cmd.dyaw:
                # rotation deltas compose in the world frame
                quat = quat_multiply(rpy_quat(cmd.droll, cmd.dpitch, cmd.dyaw), quat)
            st.ee_target = Pose(pos, quat)
        elif isinstance(cmd, protocol.PoseTarget):
            target = Pose.from_list7(cmd.pose)
            st.ee_target = Pose(self._clamp_bounds(target.position), target.orientation)
        elif isinstance(cmd, protocol.GripperCmd):
            st.gripper_target = GRIPPER_CLOSED if cmd.action == "close" else GRIPPER_OPEN
        else:
            raise TypeError(f"not a teleop command: {type(cmd).__name__}")

    def reset(self) -> None:
        """Restore the scene's initial content. Tick (and the session's seq
        counter) continue so recorded streams stay monotone through a reset."""
        tick = self.state.tick
        self.state = self._initial_state()
        self.state.tick = tick

    # -- stepping -----------------------------------------------------------

    def step(self, dt: float) -> None:
        """(1) one velocity-clamped IK step toward the target, (2) resolve a
        gripper transition into a grasp/release, (3) carry the grasped object,
        (4) advance the tick."""
        if dt != self.dt:
            raise ValueError(f"dt {dt} does not match the session dt {self.dt}")
        st = self.state
        q = resolved_rate_step(self.model, st.joint_config, st.ee_target, self.ik, dt)
        ee = fk_pose(self.model, q)

        gripper, grasped, offset = st.gripper, st.grasped_object, st.grasp_offset
        if st.gripper_target == GRIPPER_CLOSED and gripper == GRIPPER_OPEN:
            gripper = GRIPPER_CLOSED
            hit = self._nearest_graspable(ee.position)
            if hit is not None:
                grasped = hit
                offset = ee.inverse().compose(st.object_poses[hit])
        elif st.gripper_target == GRIPPER_OPEN and gripper == GRIPPER_CLOSED:
            # released object keeps the pose it had when the gripper opened
            gripper = GRIPPER_OPEN
            grasped, offset = None, None

        if grasped is not None:
            st.object_poses = dict(st.object_poses)
            st.object_poses[grasped] = ee.compose(offset)

        st.joint_config = q
        st.gripper = gripper
        st.grasped_object = grasped
        st.grasp_offset = offset
        st.tick += 1

    def _nearest_graspable(self, ee_position: np.ndarray) -> str | None:
        """Nearest graspable object center within GRASP_RADIUS; ties break to
        the lexicographically smallest id."""
        best = None
        for obj in self.scene.objects:
            if not obj.graspable:
                continue
            d = float(np.linalg.norm(self.state.object_poses[obj.id].position - ee_position))
            if d <= GRASP_RADIUS:
                key = (d, obj.id)
                if best is None or key < best:
                    best = key
        return best[1] if best else None

    def snapshot(self, seq: int) -> SimFrame:
        """Pure projection of the state, with FK-computed end-effector pose."""
        st = self.state
        ee = fk_pose(self.model, st.joint_config)
        return SimFrame(
            tick=st.tick,
            time=sim_time(st.tick),
            seq=seq,
            joint_config=tuple(float(v) for v in st.joint_config),
            ee=tuple(ee.to_list7()),
            gripper=st.gripper,
            grasped_object=st.grasped_object,
            object_poses={oid: tuple(p.to_list7()) for oid, p in st.object_poses.items()},
        )

    # -- state snapshots for episode manifests -------------------------------

    def state_record(self) -> dict:
        st = self.state
        return {
            "tick": st.tick,
            "q": [float(v) for v in st.joint_config],
            "ee_target": st.ee_target.to_list7(),
            "gripper": st.gripper,
            "gripper_target": st.gripper_target,
            "grasped": st.grasped_object,
            "grasp_offset": st.grasp_offset.to_list7() if st.grasp_offset else None,
            "objects": {oid: p.to_list7() for oid, p in st.object_poses.items()},
        }

    def restore_state(self, record: dict) -> None:
        self.state = WorldState(
            tick=int(record["tick"]),
            joint_config=self.model.check_config(record["q"]),
            ee_target=Pose.from_list7(record["ee_target"]),
            gripper=record["gripper"],
            gripper_target=record["gripper_target"],
            grasped_object=record["grasped"],
            grasp_offset=Pose.from_list7(record["grasp_offset"])
            if record["grasp_offset"] else None,
            object_poses={oid: Pose.from_list7(p)
                          for oid, p in record["objects"].items()},
        )


def load_scene(doc: Section, models: dict) -> tuple:
    """Parse a scene document, resolve its robot from the registry, and build
    the tick-0 world. Returns (SceneSpec, World)."""
    scene = parse_scene(doc)
    if scene.robot not in models:
        raise SceneError(f"unknown robot {scene.robot!r} referenced by scene {scene.name!r}")
    return scene, World(scene, models[scene.robot])
