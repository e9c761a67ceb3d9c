"""Training-time data generation.

One scripted demonstration per object stands in for the human operator:
the robot is placed at the bottleneck pose, records the goal observation,
autonomously collects labeled observations from random poses above it, then
returns to the bottleneck and records the demonstration trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .buffer import AlignmentSample, DemoRecord
from .geometry import (
    Frame,
    Pose,
    Twist,
    compose,
    displacement_to_bottleneck,
    inverse,
    quat_from_axis_angle,
    se3_log,
)
from .scene import world as W
from .scene.objects import TASKS, ObjectSpec, make_bread, make_cap


class ScriptError(ValueError):
    pass


class VisibilityError(ValueError):
    pass


@dataclass(frozen=True)
class CollectionConfig:
    I: int = 100
    x_range: tuple = (-0.10, 0.10)
    y_range: tuple = (-0.10, 0.10)
    z_range: tuple = (0.0, 0.20)
    yaw_range: tuple = (-math.pi / 4, math.pi / 4)
    sample_yaw: bool = True
    dt: float = 0.05
    rng_seed: int = 0
    # replace the first random pose with the bottleneck itself (label zero)
    include_bottleneck: bool = False

    def __post_init__(self):
        if self.I < 1:
            raise ValueError("I must be >= 1")
        for name in ("x_range", "y_range", "z_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError("%s must be a positive range" % name)
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum((hi - lo) ** 2 for lo, hi in (self.x_range, self.y_range, self.z_range)))


Step = tuple  # (Twist, gripper event or None)


@dataclass(frozen=True)
class DemoScript:
    task: str
    bottleneck_in_object_frame: Pose
    twist_program: Callable[[ObjectSpec, float], list] = field(compare=False)
    params: tuple = ()


def _tw(vx=0.0, vy=0.0, vz=0.0, wx=0.0, wy=0.0, wz=0.0) -> Twist:
    return Twist((vx, vy, vz), (wx, wy, wz))


def _move(n: int, ev=None, **kw) -> list:
    return [(_tw(**kw), None) for _ in range(n)] + ([(Twist.zero(), ev)] if ev else [])


def _steps(distance: float, speed: float, dt: float) -> int:
    n = distance / (speed * dt)
    if abs(n - round(n)) > 1e-9:
        raise ScriptError("segment of %.4f m at %.4f m/s is not a whole number of steps" % (distance, speed))
    return int(round(n))


DEFAULT_PARAMS = {
    "grasp": {"hover": 0.35, "speed": 0.10, "lift": 0.15},
    "pour": {"hover": 0.35, "speed": 0.10, "lift": 0.12, "tilt_deg": 110.0, "tilt_steps": 40, "hold": 4},
    "unscrew": {"hover": 0.35, "speed": 0.10, "turns": 3, "turn_steps": 25, "thread_lift": 0.002, "lift": 0.08},
    "insert_cap": {"approach": 0.33, "fine": 0.02, "clearance": 0.003, "speed": 0.10, "fine_speed": 0.02,
                   "retreat": 0.05},
    "insert_bread": {"approach": 0.33, "fine": 0.02, "depth": 0.03, "speed": 0.10, "fine_speed": 0.02,
                     "retreat": 0.05},
}


def _grasp_program(p):
    def program(spec, dt):
        down = _steps(p["hover"], p["speed"], dt)
        up = _steps(p["lift"], p["speed"], dt)
        return _move(down, W.CLOSED, vz=-p["speed"]) + _move(up, vz=p["speed"])
    return program


def _pour_program(p):
    def program(spec, dt):
        from .scene.objects import POUR_TARGET_OFFSET
        down = _steps(p["hover"], p["speed"], dt)
        up = _steps(p["lift"], p["speed"], dt)
        dx, dy = POUR_TARGET_OFFSET
        dist = math.hypot(dx, dy)
        n_over = _steps(dist, p["speed"], dt)
        vx, vy = p["speed"] * dx / dist, p["speed"] * dy / dist
        tilt = math.radians(p["tilt_deg"])
        w = tilt / (p["tilt_steps"] * dt)
        return (_move(down, W.CLOSED, vz=-p["speed"]) + _move(up, vz=p["speed"])
                + _move(n_over, vx=vx, vy=vy) + _move(p["tilt_steps"], wx=w)
                + _move(p["hold"]) + _move(p["tilt_steps"], wx=-w))
    return program


def _unscrew_program(p):
    def program(spec, dt):
        down = _steps(p["hover"], p["speed"], dt)
        n = p["turn_steps"]
        w = (math.pi / 2) / (n * dt)
        vz = p["thread_lift"] / (n * dt)
        turns = []
        for _ in range(p["turns"]):
            turns += _move(n, vz=vz, wz=w)
        return _move(down, W.CLOSED, vz=-p["speed"]) + turns + _move(_steps(p["lift"], p["speed"], dt), vz=p["speed"])
    return program


def _insert_program(p):
    def program(spec, dt):
        return (_move(_steps(p["approach"], p["speed"], dt), vz=-p["speed"])
                + _move(_steps(p["fine"], p["fine_speed"], dt), W.OPEN, vz=-p["fine_speed"])
                + _move(_steps(p["retreat"], p["speed"], dt), vz=p["speed"]))
    return program


def bottleneck_for(task: str, spec: ObjectSpec, p: dict) -> Pose:
    """End-effector bottleneck pose in the object frame."""
    if task in ("grasp", "pour"):
        if spec.grasp_site is None:
            raise ScriptError("%s has no grasp site" % spec.name)
        site = np.asarray(spec.grasp_site) + [0.0, 0.0, p["hover"]]
    elif task == "unscrew":
        cap = make_cap(spec.mouth_radius)
        site = np.asarray(spec.mouth) + np.asarray(cap.grasp_site) + [0.0, 0.0, p["hover"]]
    elif task == "insert_cap":
        cap = make_cap(spec.mouth_radius)
        drop = p["approach"] + p["fine"]
        site = np.asarray(spec.mouth) + [0.0, 0.0, cap.grasp_site[2] + p["clearance"] + drop]
    elif task == "insert_bread":
        bread = make_bread(spec.slot[2])
        cx, cy, _, _ = spec.slot
        drop = p["approach"] + p["fine"]
        site = np.array([cx, cy, spec.height - p["depth"] + bread.grasp_site[2] + drop])
        # held bread lies along end-effector y; the slot runs along object x
        return Pose(site, quat_from_axis_angle([0, 0, 1], -math.pi / 2), Frame.OBJECT, Frame.END_EFFECTOR)
    else:
        raise ScriptError("unknown task %r" % task)
    return Pose(site, frame=Frame.OBJECT, child=Frame.END_EFFECTOR)


_PROGRAMS = {"grasp": _grasp_program, "pour": _pour_program, "unscrew": _unscrew_program,
             "insert_cap": _insert_program, "insert_bread": _insert_program}


def canonical_script(spec: ObjectSpec, task: str | None = None, **overrides) -> DemoScript:
    task = task or spec.task
    if task not in TASKS:
        raise ScriptError("unknown task %r" % task)
    p = dict(DEFAULT_PARAMS[task])
    unknown = set(overrides) - set(p)
    if unknown:
        raise ScriptError("unknown script parameters for %s: %s" % (task, sorted(unknown)))
    p.update(overrides)
    return DemoScript(task, bottleneck_for(task, spec, p), _PROGRAMS[task](p), tuple(sorted(p.items())))


def script_from_json(d: dict, spec: ObjectSpec) -> DemoScript:
    d = dict(d)
    task = d.pop("task", spec.task)
    return canonical_script(spec, task, **d)


def scripted_trajectory(script: DemoScript, spec: ObjectSpec, dt: float = 0.05) -> list:
    steps = list(script.twist_program(spec, dt))
    if not steps:
        raise ScriptError("script for %s produced an empty trajectory" % script.task)
    return steps


def bottleneck_world(world: W.WorldState, script: DemoScript) -> Pose:
    """b^W for the primary object (index 0) of ``world``."""
    b = compose(world.objects[0][1], script.bottleneck_in_object_frame)
    return b.with_frames(Frame.WORLD, Frame.END_EFFECTOR)


def execute(world: W.WorldState, trajectory, dt: float) -> W.WorldState:
    for twist, event in trajectory:
        world = W.step(world, twist, dt)
        if event is not None:
            world = W.set_gripper(world, event)
    return world


def sample_pose(b: Pose, cfg: CollectionConfig, rng: np.random.Generator) -> Pose:
    bp = b.to_planar()
    ox = rng.uniform(*cfg.x_range)
    oy = rng.uniform(*cfg.y_range)
    oz = rng.uniform(*cfg.z_range)
    oyaw = rng.uniform(*cfg.yaw_range) if cfg.sample_yaw else 0.0
    return W.ee_pose(bp.x + ox, bp.y + oy, bp.z + oz, bp.theta_z + oyaw)


def collect_demo(world: W.WorldState, spec: ObjectSpec, script: DemoScript, cfg: CollectionConfig,
                 validate: bool = True) -> DemoRecord:
    """Bottleneck observation, ``cfg.I`` labeled random-pose observations, then the demo."""
    rng = np.random.default_rng(cfg.rng_seed)
    b = bottleneck_world(world, script)
    at_b = W.with_ee(world, b)
    o_b, ids = W.render(at_b, with_ids=True)
    if not np.any(ids == 0):
        raise VisibilityError("%s is not visible from its bottleneck pose" % spec.name)
    samples = []
    for i in range(cfg.I):
        p = b if (i == 0 and cfg.include_bottleneck) else sample_pose(b, cfg, rng)
        o_i = W.render(W.with_ee(world, p))
        samples.append(AlignmentSample(o_i, displacement_to_bottleneck(p, b), p))
    trajectory = scripted_trajectory(script, spec, cfg.dt)
    if validate:
        final = execute(at_b, trajectory, cfg.dt)
        if not W.check_success(final, script.task):
            raise ScriptError("script %s fails on %s" % (script.task, spec.name))
    return DemoRecord(script.task, o_b, tuple(samples), tuple(trajectory), cfg.dt,
                      object_meta=spec, bottleneck_pose=b, object_pose=world.objects[0][1])


def approach_trajectory(start: Pose, target: Pose, dt: float, max_linear: float = 0.25,
                        max_angular: float = 1.0) -> list:
    """Constant body twist carrying ``start`` exactly onto ``target``."""
    v, w = se3_log(compose(inverse(start.with_frames(Frame.WORLD, None)), target.with_frames(Frame.WORLD, None)))
    duration = max(np.linalg.norm(v) / max_linear, np.linalg.norm(w) / max_angular, dt)
    n = int(math.ceil(duration / dt - 1e-9))
    T = n * dt
    tw = Twist(tuple(v / T), tuple(w / T))
    return [(tw, None)] * n
