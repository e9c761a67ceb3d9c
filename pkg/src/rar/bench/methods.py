"""The four compared methods behind one train/act interface.

                 no decomposition   decomposition
  retrieval      vinn               ours
  no retrieval   bc                 bc_guapo
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .. import act, align
from ..buffer import MemoryBuffer
from ..geometry import PlanarPose4
from ..scene import world as W
from ..scene.objects import ObjectSpec
from ..teach import DemoScript, canonical_script, collect_demo
from .policies import (
    BCPolicy,
    UntrainedError,
    VINNPolicy,
    full_stream,
    interaction_stream,
    rollout,
)


@dataclass
class Outcome:
    success: bool
    steps: int
    cause: str | None = None
    task: str | None = None
    trace: dict | None = None  # EpisodeResult JSON, only for methods that produce one


@dataclass
class Demo:
    spec: ObjectSpec
    placement: PlanarPose4
    script: DemoScript
    record: object  # DemoRecord as collected, object meta included

    def start_world(self) -> W.WorldState:
        return W.setup_world(self.spec, self.placement)


@dataclass
class DemoSet:
    """Everything every method learns from: one scripted demo per (object, placement)."""

    demos: list
    buffer: MemoryBuffer
    dt: float
    _full: list | None = field(default=None, repr=False)
    _interaction: list | None = field(default=None, repr=False)

    @classmethod
    def from_buffer(cls, buf: MemoryBuffer, dt: float) -> DemoSet:
        """Rebuild a demo set from a saved buffer; every demo must carry object meta."""
        demos = []
        for d in buf.demos:
            spec = buf.train_meta(d.demo_id)
            if spec is None or d.object_pose is None:
                raise ValueError("demo %d has no object meta; cannot rebuild its world" % d.demo_id)
            demos.append(Demo(spec, d.object_pose.to_planar(), canonical_script(spec, d.task), d))
        return cls(demos, buf, dt)

    def full_streams(self) -> list:
        if self._full is None:
            self._full = [full_stream(d.start_world(), d.script, d.record.trajectory, self.dt) for d in self.demos]
        return self._full

    def interaction_streams(self) -> list:
        if self._interaction is None:
            self._interaction = [interaction_stream(d.start_world(), d.script, d.record.trajectory, self.dt)
                                 for d in self.demos]
        return self._interaction


def demo_placements(n: int, rng: np.random.Generator, spec: ObjectSpec) -> list:
    """The first demo sits at the table center; further demos use sampled placements."""
    out = [PlanarPose4(0.0, 0.0, 0.0, 0.0)]
    while len(out) < n:
        out.append(W.sample_test_pose(spec, rng))
    return out


def collect_demos(objects, cfg, seed: int = 0, extractors=("colorhist", "moments")) -> DemoSet:
    """Collect ``cfg["demos_per_object"]`` demos of every object. ``cfg`` is a RunConfig."""
    buf = MemoryBuffer(extractors=extractors)
    demos = []
    for i, spec in enumerate(objects):
        rng = np.random.default_rng([seed, i, 17])
        for k, place in enumerate(demo_placements(cfg["demos_per_object"], rng, spec)):
            world = W.setup_world(spec, place)
            script = canonical_script(spec)
            rec = collect_demo(world, spec, script, cfg.collection(int(rng.integers(2 ** 31))))
            buf.add_demo(rec)
            demos.append(Demo(spec, place, script, rec))
    return DemoSet(demos, buf, cfg["dt"])


class Method:
    id = ""
    uses_retrieval = False
    uses_decomposition = False

    def __init__(self, cfg):
        self.cfg = cfg
        self.trained = False

    def train(self, demos: DemoSet) -> None:
        raise NotImplementedError

    def act(self, world: W.WorldState) -> Outcome:
        raise NotImplementedError

    def _check(self):
        if not self.trained:
            raise UntrainedError("%s has not been trained" % self.id)

    def _policy(self) -> BCPolicy:
        return BCPolicy(self.cfg["policy_extractor"], tuple(self.cfg["train"]["hidden"]),
                        replace(self.cfg.train_config().sgd(), loss_weights=()))


class Ours(Method):
    id = "ours"
    uses_retrieval = True
    uses_decomposition = True

    dump_obs = False

    def train(self, demos: DemoSet, aligner=None) -> None:
        """Train the aligner, or adopt ``aligner`` when one is given."""
        self.buffer = demos.buffer
        ext = self.cfg["retrieval_extractor"]
        if ext not in self.buffer.embeddings:
            self.buffer.compute_embeddings(ext)
        if aligner is None:
            aligner = align.train(self.buffer, self.cfg.train_config(), self.cfg["aligner_extractor"])
        self.aligner = aligner
        self.trained = True

    def act(self, world: W.WorldState) -> Outcome:
        self._check()
        r = act.run_episode(world, self.buffer, self.aligner, self.cfg["retrieval_extractor"],
                            self.cfg.servo_config())
        return Outcome(r.success, r.steps_total, r.cause, r.task_inferred, r.to_json(self.dump_obs))


class BC(Method):
    id = "bc"

    def train(self, demos: DemoSet) -> None:
        self.policy = self._policy().fit(demos.full_streams())
        self.dt = demos.dt
        self.trained = True

    def act(self, world: W.WorldState) -> Outcome:
        self._check()
        r = rollout(world, self.policy, self.dt, self.cfg["max_steps"])
        return Outcome(r.success, r.steps, r.cause)


class VINN(Method):
    id = "vinn"
    uses_retrieval = True

    def train(self, demos: DemoSet) -> None:
        v = self.cfg["vinn"]
        self.policy = VINNPolicy(v["extractor"], v["k"], v["temperature"]).fit(demos.full_streams())
        self.dt = demos.dt
        self.trained = True

    def act(self, world: W.WorldState) -> Outcome:
        self._check()
        r = rollout(world, self.policy, self.dt, self.cfg["max_steps"])
        return Outcome(r.success, r.steps, r.cause)


class BCGuapo(Method):
    """Alignment without a goal input, then a cloned interaction policy."""

    id = "bc_guapo"
    uses_decomposition = True

    def train(self, demos: DemoSet) -> None:
        self.aligner = align.train(demos.buffer, self.cfg.train_config(), self.cfg["aligner_extractor"],
                                   goal_conditioned=False)
        self.policy = self._policy().fit(demos.interaction_streams())
        self.dt = demos.dt
        self.trained = True

    def act(self, world: W.WorldState) -> Outcome:
        self._check()
        world, trace = align.servo(world, self.aligner, None, self.cfg.servo_config())
        r = rollout(world, self.policy, self.dt, self.cfg["max_steps"])
        return Outcome(r.success, trace.iterations + r.steps, r.cause)


METHOD_TYPES = {m.id: m for m in (Ours, BC, VINN, BCGuapo)}


def make_method(method_id: str, cfg) -> Method:
    if method_id not in METHOD_TYPES:
        raise KeyError("unknown method %r" % method_id)
    return METHOD_TYPES[method_id](cfg)
