"""Deployment: retrieve a demo, servo to its bottleneck, replay its twists."""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .align import ServoConfig, ServoTrace, servo
from .buffer import DemoRecord, MemoryBuffer, RetrievalResult
from .geometry import Pose
from .scene import world as W


@dataclass(eq=False)
class EpisodeResult:
    retrieval: RetrievalResult | None
    servo_trace: ServoTrace
    replay_final_pose: Pose | None
    success: bool
    task_inferred: str
    steps_total: int
    wall_time: float
    cause: str | None = None  # None on success, else "servo" or "task"
    final_world: W.WorldState | None = field(default=None, repr=False)
    live_obs: W.Observation | None = field(default=None, repr=False)

    def to_json(self, dump_obs: bool = False) -> dict:
        r = self.retrieval
        out = {
            "demo_id": None if r is None else r.demo_id,
            "matched_key": None if r is None else list(r.matched_key),
            "score": None if r is None else r.score,
            "task_inferred": self.task_inferred,
            "success": bool(self.success),
            "cause": self.cause,
            "steps_total": self.steps_total,
            "wall_time": self.wall_time,
            "servo": self.servo_trace.to_json(),
            "replay_final_pose": None if self.replay_final_pose is None else
            [*map(float, self.replay_final_pose.position), *map(float, self.replay_final_pose.orientation)],
        }
        if dump_obs and self.live_obs is not None:
            out["live_obs"] = {
                "rgb": base64.b64encode(self.live_obs.rgb.tobytes()).decode("ascii"),
                "depth": base64.b64encode(self.live_obs.depth.astype("<f4").tobytes()).decode("ascii"),
            }
        return out


def replay(world: W.WorldState, trajectory, dt: float) -> W.WorldState:
    """Open-loop execution of recorded (twist, gripper event) steps."""
    for twist, event in trajectory:
        world = W.step(world, twist, dt)
        if event is not None:
            world = W.set_gripper(world, event)
    return world


def _finish(world, retrieval, trace, t0, live, task):
    if not trace.converged:
        return EpisodeResult(retrieval, trace, None, False, task, trace.iterations, time.perf_counter() - t0,
                             "servo", world, live)
    world = replay(world, retrieval.trajectory, retrieval.dt)
    ok = world.task == task and W.check_success(world, task)
    return EpisodeResult(retrieval, trace, world.end_effector, ok, task,
                         trace.iterations + len(retrieval.trajectory), time.perf_counter() - t0,
                         None if ok else "task", world, live)


def run_episode(world: W.WorldState, buf: MemoryBuffer, model, extractor_id: str = "patch",
                servo_cfg: ServoConfig = ServoConfig(), requery: bool = False) -> EpisodeResult:
    """Render, retrieve, servo to the retrieved bottleneck observation, replay.

    With ``requery`` the goal is re-retrieved from every live observation
    during servoing; the last retrieval supplies the trajectory.
    """
    t0 = time.perf_counter()
    live = W.render(world)
    retrieval = buf.query(live, extractor_id)
    if requery:
        state = {"r": retrieval}

        class _Requery:
            def predict(self, o_live, o_goal=None):
                state["r"] = buf.query(o_live, extractor_id)
                return model.predict(o_live, state["r"].bottleneck_obs)

        world, trace = servo(world, _Requery(), retrieval.bottleneck_obs, servo_cfg)
        retrieval = state["r"]
    else:
        world, trace = servo(world, model, retrieval.bottleneck_obs, servo_cfg)
    return _finish(world, retrieval, trace, t0, live, retrieval.task)


def run_with_demo(world: W.WorldState, demo: DemoRecord, model,
                  servo_cfg: ServoConfig = ServoConfig()) -> EpisodeResult:
    """Servo and replay a given demo, skipping retrieval."""
    t0 = time.perf_counter()
    live = W.render(world)
    r = RetrievalResult(demo.demo_id if demo.demo_id is not None else -1, (demo.demo_id, -1), 1.0,
                        demo.bottleneck_obs, demo.trajectory, demo.task, demo.dt)
    world, trace = servo(world, model, demo.bottleneck_obs, servo_cfg)
    return _finish(world, r, trace, t0, live, demo.task)


def export_jsonl(results, path, dump_obs: bool = False) -> None:
    with open(path, "w") as f:
        for r in results:
            f.write(json.dumps(r.to_json(dump_obs), sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def decode_obs(d: dict) -> tuple[np.ndarray, np.ndarray]:
    rgb = np.frombuffer(base64.b64decode(d["rgb"]), dtype=np.uint8).reshape(128, 128, 3)
    depth = np.frombuffer(base64.b64decode(d["depth"]), dtype="<f4").reshape(128, 128)
    return rgb, depth
