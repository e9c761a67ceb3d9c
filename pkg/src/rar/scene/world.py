"""Kinematic tabletop world: a free-flying end-effector with a wrist camera."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import (
    Frame,
    Pose,
    PlanarPose4,
    Twist,
    compose,
    integrate_twist,
    inverse,
    quat_from_axis_angle,
    quat_to_matrix,
)
from .objects import (
    POUR_TARGET_OFFSET,
    TASKS,
    ObjectSpec,
    make_bread,
    make_cap,
    make_container,
)
from .render import Intrinsics, render_view

OPEN = "open"
CLOSED = "closed"

GRASP_RADIUS = 0.03
LIFT_HEIGHT = 0.10
POUR_TILT = math.radians(100.0)
UNSCREW_YAW = math.radians(270.0)
UNSCREW_LIFT = 0.03
CAP_TOLERANCE = 0.004
# cap base height above the mouth at release that still counts as engaged
CAP_ENGAGE = (-0.005, 0.015)
BREAD_DEPTH = 0.01
START_HEIGHT = 0.70

# camera sits 5 cm along end-effector +x and looks down end-effector -z
MOUNT = Pose(np.array([0.05, 0.0, 0.0]), quat_from_axis_angle([1, 0, 0], math.pi),
             Frame.END_EFFECTOR, Frame.CAMERA)


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Table:
    height: float = 0.0
    xmin: float = -1.0
    xmax: float = 1.0
    ymin: float = -1.0
    ymax: float = 1.0

    def as_tuple(self):
        return (self.height, self.xmin, self.xmax, self.ymin, self.ymax)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)


@dataclass(frozen=True, eq=False)
class Observation:
    rgb: np.ndarray
    depth: np.ndarray
    camera_pose: Pose | None = None

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        depth = np.asarray(self.depth)
        if rgb.shape != (128, 128, 3) or rgb.dtype != np.uint8:
            raise ValueError("rgb must be 128x128x3 uint8, got %s %s" % (rgb.shape, rgb.dtype))
        if depth.shape != (128, 128) or depth.dtype != np.float32:
            raise ValueError("depth must be 128x128 float32, got %s %s" % (depth.shape, depth.dtype))
        if np.any(depth < 0) or not np.all(np.isfinite(depth)):
            raise ValueError("depth must be finite and non-negative")

    def same_pixels(self, other: Observation) -> bool:
        return np.array_equal(self.rgb, other.rgb) and np.array_equal(self.depth, other.depth)


@dataclass(frozen=True, eq=False)
class WorldState:
    """Immutable world value. Object poses are full poses because held objects can tilt."""

    objects: tuple  # of (ObjectSpec, Pose)
    end_effector: Pose
    gripper: str = OPEN
    attached: int | None = None
    attach_offset: Pose | None = None
    table: Table = Table()
    rng_seed: int = 0
    task: str | None = None
    time: float = 0.0
    # task progress flags accumulated over the episode
    progress: tuple = ()
    clipped: int = 0

    def __post_init__(self):
        if self.attached is not None and self.gripper != CLOSED:
            raise ValueError("attached object requires a closed gripper")
        for spec, pose in self.objects:
            if pose.position[2] < self.table.height - 1e-9:
                raise ValueError("object %s below the table" % spec.name)

    @property
    def camera_pose(self) -> Pose:
        return compose(self.end_effector, MOUNT)

    @property
    def flags(self) -> dict:
        return dict(self.progress)

    def with_flags(self, **kw) -> WorldState:
        f = self.flags
        f.update(kw)
        return replace(self, progress=tuple(sorted(f.items())))

    def object_pose(self, idx: int) -> Pose:
        return self.objects[idx][1]

    def with_object_pose(self, idx: int, pose: Pose) -> WorldState:
        objs = list(self.objects)
        objs[idx] = (objs[idx][0], pose)
        return replace(self, objects=tuple(objs))

    def find_role(self, role: str) -> int | None:
        for i, (spec, _) in enumerate(self.objects):
            if spec.role == role:
                return i
        return None


def ee_pose(x: float, y: float, z: float, yaw: float = 0.0) -> Pose:
    return Pose(np.array([x, y, z]), quat_from_axis_angle([0, 0, 1], yaw), Frame.WORLD, Frame.END_EFFECTOR)


def start_pose(table: Table = Table()) -> Pose:
    """Deployment start: camera 0.70 m above the table center, looking down."""
    cx, cy = table.center
    cam_offset = MOUNT.position
    return ee_pose(cx - cam_offset[0], cy - cam_offset[1], table.height + START_HEIGHT)


def object_pose(p: PlanarPose4) -> Pose:
    return p.to_pose(Frame.WORLD, Frame.OBJECT)


def _held_offset(spec: ObjectSpec) -> Pose:
    """End-effector -> held object, with the grasp site at the gripper origin.

    Bread is held lengthwise along end-effector y so it stays out of the
    camera's view.
    """
    g = np.asarray(spec.grasp_site)
    yaw = math.pi / 2 if spec.role == "bread" else 0.0
    q = quat_from_axis_angle([0, 0, 1], yaw)
    return Pose(-(quat_to_matrix(q) @ g), q, Frame.END_EFFECTOR, Frame.OBJECT)


def setup_world(spec: ObjectSpec, pose: PlanarPose4, ee: Pose | None = None,
                table: Table = Table(), seed: int = 0) -> WorldState:
    """Place a task object and the fixtures its task needs.

    pour: a bowl at a fixed offset in the cup frame. unscrew: a cap seated on
    the mouth. insert_cap / insert_bread: the cap or bread starts in the gripper.
    """
    pose = PlanarPose4(pose.x, pose.y, table.height, pose.theta_z)
    base = object_pose(pose)
    objects = [(spec, base)]
    ee = ee if ee is not None else start_pose(table)
    gripper, attached, offset = OPEN, None, None
    flags = {}
    if spec.task == "pour":
        dx, dy = POUR_TARGET_OFFSET
        bowl = compose(base, Pose(np.array([dx, dy, 0.0]), frame=Frame.OBJECT, child=Frame.OBJECT))
        objects.append((make_container(), bowl))
    elif spec.task == "unscrew":
        cap = make_cap(spec.mouth_radius)
        objects.append((cap, compose(base, Pose(np.asarray(spec.mouth), frame=Frame.OBJECT, child=Frame.OBJECT))))
        flags["cap_seated"] = True
        flags["engaged_yaw"] = 0.0
    elif spec.task in ("insert_cap", "insert_bread"):
        held = make_cap(spec.mouth_radius) if spec.task == "insert_cap" else make_bread(spec.slot[2])
        offset = _held_offset(held)
        objects.append((held, compose(ee, offset)))
        gripper, attached = CLOSED, len(objects) - 1
    return WorldState(tuple(objects), ee, gripper, attached, offset, table, seed, spec.task,
                      progress=tuple(sorted(flags.items())))


def with_ee(world: WorldState, pose: Pose) -> WorldState:
    """Move the end-effector (and anything it holds) to ``pose``; clips at the table plane."""
    clipped = world.clipped
    if pose.position[2] < world.table.height:
        p = pose.position.copy()
        p[2] = world.table.height
        pose = Pose(p, pose.orientation, pose.frame, pose.child)
        clipped += 1
    if world.attached is not None:
        held = compose(pose, world.attach_offset)
        if held.position[2] < world.table.height:
            # a held object stops the gripper at the table too
            p = pose.position.copy()
            p[2] += world.table.height - held.position[2]
            pose = Pose(p, pose.orientation, pose.frame, pose.child)
            clipped += 1
    w = replace(world, end_effector=pose, clipped=clipped)
    if w.attached is not None:
        w = w.with_object_pose(w.attached, compose(pose, w.attach_offset))
    return w


def _tilt(pose: Pose) -> float:
    z = pose.rotation[:, 2]
    return math.acos(max(-1.0, min(1.0, float(z[2]))))


def _update_progress(before: WorldState, after: WorldState, twist: Twist, dt: float) -> WorldState:
    f = after.flags
    if after.attached is None:
        return after
    spec, pose = after.objects[after.attached]
    if spec.role == "cap" and f.get("cap_seated"):
        yaw = f.get("engaged_yaw", 0.0) + twist.angular[2] * dt
        seat = before.flags.get("seat_z")
        rise = pose.position[2] - seat if seat is not None else 0.0
        if rise > UNSCREW_LIFT:
            # cap leaves the thread: unscrewed only if it was turned far enough
            return after.with_flags(engaged_yaw=yaw, cap_seated=False,
                                    unscrewed=yaw >= UNSCREW_YAW - 1e-6)
        return after.with_flags(engaged_yaw=yaw)
    if spec.role == "object" and spec.task == "pour" and spec.mouth is not None:
        bowl = after.find_role("container")
        if bowl is not None and _tilt(pose) >= POUR_TILT:
            mouth = pose.transform_point(spec.mouth)
            bspec, bpose = after.objects[bowl]
            if math.hypot(*(mouth[:2] - bpose.position[:2])) <= bspec.footprint_radius:
                return after.with_flags(poured=True)
    return after


def step(world: WorldState, action: Twist, dt: float) -> WorldState:
    if action.frame != Frame.END_EFFECTOR:
        raise ValueError("actions must be end-effector twists")
    new = with_ee(world, integrate_twist(world.end_effector, action, dt))
    new = replace(new, time=world.time + dt)
    return _update_progress(world, new, action, dt)


def _support_pose(world: WorldState, idx: int) -> Pose:
    """Drop a released object upright onto the table below it."""
    _, pose = world.objects[idx]
    yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0])
    p = pose.position.copy()
    p[2] = world.table.height
    return Pose(p, quat_from_axis_angle([0, 0, 1], yaw), Frame.WORLD, Frame.OBJECT)


def cap_radial_error(world: WorldState, cap_idx: int, bottle_idx: int = 0) -> tuple[float, float]:
    """(radial error, base height above mouth) of a cap relative to the bottle axis."""
    bspec, bpose = world.objects[bottle_idx]
    mouth = bpose.transform_point(bspec.mouth)
    _, cpose = world.objects[cap_idx]
    radial = math.hypot(*(cpose.position[:2] - mouth[:2]))
    return radial, float(cpose.position[2] - mouth[2])


def bread_in_slot(world: WorldState, bread_idx: int, toaster_idx: int = 0) -> bool:
    tspec, tpose = world.objects[toaster_idx]
    bspec, bpose = world.objects[bread_idx]
    cx, cy, hl, hw = tspec.slot
    rel = compose(inverse(tpose), bpose)
    bz = rel.position[2]
    length = bspec.primitives[0].size[0]
    thick = bspec.primitives[0].size[1]
    # footprint corners of the bread in the toaster frame
    corners = np.array([[sx * length / 2, sy * thick / 2, 0.0] for sx in (-1, 1) for sy in (-1, 1)])
    pts = (rel.rotation @ corners.T).T + rel.position
    inside = np.all(np.abs(pts[:, 0] - cx) <= hl) and np.all(np.abs(pts[:, 1] - cy) <= hw)
    top = tspec.height
    return bool(inside and bz <= top - BREAD_DEPTH)


def set_gripper(world: WorldState, cmd: str, grasp_radius: float = GRASP_RADIUS) -> WorldState:
    if cmd not in (OPEN, CLOSED):
        raise ValueError("gripper command must be open or closed")
    if cmd == CLOSED:
        if world.gripper == CLOSED:
            return world
        g = world.end_effector.position
        best, best_d = None, grasp_radius
        for i, (spec, pose) in enumerate(world.objects):
            if spec.grasp_site is None:
                continue
            dist = float(np.linalg.norm(pose.transform_point(spec.grasp_site) - g))
            if dist <= best_d:
                best, best_d = i, dist
        if best is None:
            return replace(world, gripper=CLOSED)
        offset = compose(inverse(world.end_effector), world.objects[best][1])
        w = replace(world, gripper=CLOSED, attached=best, attach_offset=offset)
        spec = world.objects[best][0]
        if spec.role == "cap" and w.flags.get("cap_seated") and "seat_z" not in w.flags:
            w = w.with_flags(seat_z=float(world.objects[best][1].position[2]))
        return w
    if world.gripper == OPEN:
        return world
    idx = world.attached
    w = replace(world, gripper=OPEN, attached=None, attach_offset=None)
    if idx is None:
        return w
    spec = world.objects[idx][0]
    if spec.role == "cap" and world.task == "insert_cap":
        radial, height = cap_radial_error(world, idx)
        if CAP_ENGAGE[0] <= height <= CAP_ENGAGE[1] and _tilt(world.objects[idx][1]) < math.radians(10):
            bspec, bpose = world.objects[0]
            mouth = bpose.transform_point(bspec.mouth)
            seated = Pose(np.array([world.objects[idx][1].position[0], world.objects[idx][1].position[1], mouth[2]]),
                          _support_pose(world, idx).orientation, Frame.WORLD, Frame.OBJECT)
            w = w.with_object_pose(idx, seated)
            return w.with_flags(cap_radial_error=radial, cap_inserted=radial <= CAP_TOLERANCE)
    if spec.role == "bread" and world.task == "insert_bread":
        if bread_in_slot(world, idx):
            return w.with_flags(bread_inserted=True)
    if spec.role == "cap" and world.flags.get("cap_seated"):
        # let go of a cap still on its thread: it stays seated
        return w
    return w.with_object_pose(idx, _support_pose(world, idx))


def check_success(world: WorldState, task: str) -> bool:
    if task not in TASKS:
        raise TaskError("unknown task %r" % (task,))
    f = world.flags
    if task == "grasp":
        if world.attached is None:
            return False
        return world.objects[world.attached][1].position[2] >= world.table.height + LIFT_HEIGHT
    if task == "pour":
        return bool(f.get("poured", False))
    if task == "unscrew":
        return bool(f.get("unscrewed", False))
    if task == "insert_cap":
        return bool(f.get("cap_inserted", False))
    return bool(f.get("bread_inserted", False))


# test placements stay inside the start camera's view and the alignment volume
PLACEMENT_XY = 0.08
PLACEMENT_YAW = math.pi / 4


def sample_test_pose(spec: ObjectSpec, rng: np.random.Generator, table: Table = Table(),
                     xy: float = PLACEMENT_XY, yaw: float = PLACEMENT_YAW) -> PlanarPose4:
    """Uniform placement within +-xy of the table center and +-yaw of the demo heading."""
    cx, cy = table.center
    x = cx + rng.uniform(-xy, xy)
    y = cy + rng.uniform(-xy, xy)
    theta = rng.uniform(-yaw, yaw)
    return PlanarPose4(float(x), float(y), table.height, float(theta))


def render(world: WorldState, intr: Intrinsics = Intrinsics(), noise_sigma: float = 0.0,
           rng=None, with_ids: bool = False):
    cam = world.camera_pose
    rgb, depth, ids = render_view(cam, world.objects, world.table.as_tuple(), intr, noise_sigma, rng)
    obs = Observation(rgb, depth, cam)
    if with_ids:
        return obs, ids
    return obs
