"""Closed-loop baseline policies: behaviour cloning and VINN.

Both consume frame streams: (observation, action) pairs re-rendered from
scripted demonstrations. An action is the end-effector twist followed by
the gripper state reached after the step (1 closed, 0 open).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import features
from .. import mlp
from ..geometry import Twist
from ..scene import world as W
from ..teach import approach_trajectory, bottleneck_world

ACTION_DIM = 7
GRIPPER_THRESHOLD = 0.5


class UntrainedError(RuntimeError):
    pass


class EmptyFramesError(ValueError):
    pass


@dataclass
class FrameStream:
    observations: list
    actions: np.ndarray  # (n, 7)
    success: bool = True
    initial_gripper: float = 0.0


def encode_action(twist: Twist, gripper: str) -> np.ndarray:
    return np.concatenate([twist.as_vector(), [1.0 if gripper == W.CLOSED else 0.0]])


def render_stream(world: W.WorldState, trajectory, dt: float) -> FrameStream:
    """Render the observation before each step and record the step as the action."""
    obs, acts = [], []
    g0 = 1.0 if world.gripper == W.CLOSED else 0.0
    for twist, event in trajectory:
        obs.append(W.render(world))
        world = W.step(world, twist, dt)
        if event is not None:
            world = W.set_gripper(world, event)
        acts.append(encode_action(twist, world.gripper))
    return FrameStream(obs, np.array(acts), W.check_success(world, world.task), g0)


def full_stream(world: W.WorldState, script, trajectory, dt: float) -> FrameStream:
    """Approach from the current end-effector pose to the bottleneck, then the demo."""
    b = bottleneck_world(world, script)
    approach = approach_trajectory(world.end_effector, b, dt)
    return render_stream(world, list(approach) + list(trajectory), dt)


def interaction_stream(world: W.WorldState, script, trajectory, dt: float) -> FrameStream:
    """The demo alone, starting exactly at the bottleneck."""
    return render_stream(W.with_ee(world, bottleneck_world(world, script)), trajectory, dt)


def _embed_frames(extractor_id: str, streams) -> tuple[np.ndarray, np.ndarray]:
    x = features.get_extractor(extractor_id)
    obs = [o for s in streams for o in s.observations]
    if not obs:
        raise EmptyFramesError("no frames to learn from")
    return features.extract_many(x, obs), np.vstack([s.actions for s in streams])


def _gripper_inputs(streams) -> np.ndarray:
    """Gripper state before each frame's action (1 closed)."""
    out = []
    for s in streams:
        out.append(np.concatenate([[s.initial_gripper], s.actions[:-1, 6]]))
    return np.concatenate(out)[:, None]


def apply_action(world: W.WorldState, action: np.ndarray, dt: float) -> W.WorldState:
    twist = Twist.from_vector(action[:6], clip=True)
    world = W.step(world, twist, dt)
    want = W.CLOSED if action[6] > GRIPPER_THRESHOLD else W.OPEN
    if want != world.gripper:
        world = W.set_gripper(world, want)
    return world


WORKSPACE_RADIUS = 0.6
WORKSPACE_TOP = 1.2


def left_workspace(world: W.WorldState) -> bool:
    p = world.end_effector.position
    cx, cy = world.table.center
    return bool(np.hypot(p[0] - cx, p[1] - cy) > WORKSPACE_RADIUS or p[2] > world.table.height + WORKSPACE_TOP)


@dataclass
class Rollout:
    world: W.WorldState
    steps: int
    success: bool
    cause: str | None


def rollout(world: W.WorldState, policy, dt: float, max_steps: int = 400) -> Rollout:
    """Run ``policy(observation, gripper_closed) -> action`` closed loop.

    Stops early on success, when the end effector leaves the workspace, or
    when nothing is in view.
    """
    task = world.task
    for n in range(max_steps):
        try:
            a = policy(W.render(world), world.gripper == W.CLOSED)
        except features.FeatureError:
            return Rollout(world, n, False, "blind")
        world = apply_action(world, a, dt)
        if W.check_success(world, task):
            return Rollout(world, n + 1, True, None)
        if left_workspace(world):
            return Rollout(world, n + 1, False, "workspace")
    return Rollout(world, max_steps, False, "timeout")


@dataclass
class BCPolicy:
    """Per-frame regression from (descriptor, gripper state) to the 7-D action."""

    extractor_id: str = "moments"
    hidden: tuple = (256, 256)
    sgd: mlp.SGDConfig = field(default_factory=mlp.SGDConfig)
    regressor: mlp.Regressor | None = None
    train_loss: list = field(default_factory=list)

    def fit(self, streams) -> BCPolicy:
        X, Y = _embed_frames(self.extractor_id, streams)
        res = mlp.fit(np.hstack([X, _gripper_inputs(streams)]), Y, self.hidden, self.sgd)
        self.regressor, self.train_loss = res.model, res.train_loss
        return self

    def __call__(self, o: W.Observation, gripper_closed: bool = False) -> np.ndarray:
        if self.regressor is None:
            raise UntrainedError("policy has not been trained")
        e = features.extract(features.get_extractor(self.extractor_id), o).values
        return self.regressor.predict(np.append(e, float(gripper_closed)))[0]


def vinn_action(frames: np.ndarray, actions: np.ndarray, query: np.ndarray, k: int = 5,
                temperature: float = 0.1) -> np.ndarray:
    """Softmax(similarity / temperature) weighted mean of the k most similar frames' actions.

    ``frames`` rows and ``query`` are unit vectors; ties keep the lower index.
    """
    if len(frames) == 0:
        raise EmptyFramesError("VINN frame buffer is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = frames @ query
    idx = np.lexsort((np.arange(len(sims)), -sims))[:k]
    z = sims[idx] / temperature
    w = np.exp(z - z.max())
    w /= w.sum()
    return w @ actions[idx]


@dataclass
class VINNPolicy:
    extractor_id: str = "patch"
    k: int = 5
    temperature: float = 0.1
    frames: np.ndarray | None = None
    actions: np.ndarray | None = None

    def fit(self, streams) -> VINNPolicy:
        self.frames, self.actions = _embed_frames(self.extractor_id, streams)
        return self

    def __call__(self, o: W.Observation, gripper_closed: bool = False) -> np.ndarray:
        if self.frames is None:
            raise UntrainedError("VINN has no frame buffer")
        e = features.extract(features.get_extractor(self.extractor_id), o).values
        return vinn_action(self.frames, self.actions, e, self.k, self.temperature)
