"""Goal-conditioned alignment network, its trainer, and the servo loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features
from . import mlp
from .buffer import EmptyBufferError, MemoryBuffer
from .geometry import (
    Displacement4,
    Frame,
    Pose,
    apply_displacement,
    compose,
    displacement_to_bottleneck,
    inverse,
)
from .scene import world as W

HIDDEN = (256, 256)
DivergenceError = mlp.DivergenceError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    validation_fraction: float = 0.1
    angle_weight: float = 0.25
    seed: int = 0
    hidden: tuple = HIDDEN

    def __post_init__(self):
        if not self.angle_weight > 0:
            raise ValueError("angle_weight must be positive")
        self.sgd()  # validates the rest

    def sgd(self) -> mlp.SGDConfig:
        return mlp.SGDConfig(self.learning_rate, self.batch_size, self.epochs, self.validation_fraction,
                             (1.0, 1.0, 1.0, self.angle_weight), self.seed)


@dataclass(frozen=True)
class ServoConfig:
    gamma: float = 5e-3
    gamma_theta: float = math.radians(1.0)
    max_iters: int = 50
    step_scale: float = 1.0
    # translation clamp per motion: the default collection volume diagonal
    max_translation: float | None = math.sqrt(0.2 ** 2 + 0.2 ** 2 + 0.2 ** 2)

    def __post_init__(self):
        if not self.gamma > 0 or not self.gamma_theta > 0:
            raise ValueError("gamma and gamma_theta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")


@dataclass
class AlignerModel:
    input_descriptor: str
    regressor: mlp.Regressor
    train_seed: int = 0
    goal_conditioned: bool = True
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    def _embed(self, o) -> np.ndarray:
        return features.extract(features.get_extractor(self.input_descriptor), o).values

    def inputs(self, o_live, o_goal=None) -> np.ndarray:
        if self.goal_conditioned:
            return np.concatenate([self._embed(o_live), self._embed(o_goal)])
        return self._embed(o_live)

    def predict(self, o_live, o_goal=None) -> Displacement4:
        return Displacement4.from_array(self.regressor.predict(self.inputs(o_live, o_goal))[0])

    def to_bytes(self) -> bytes:
        self.regressor.meta = {"goal_conditioned": self.goal_conditioned, "train_seed": self.train_seed}
        return mlp.save_bytes(self.regressor, self.input_descriptor)

    @classmethod
    def from_bytes(cls, data: bytes) -> AlignerModel:
        reg, desc = mlp.load_bytes(data)
        return cls(desc, reg, int(reg.meta.get("train_seed", 0)), bool(reg.meta.get("goal_conditioned", True)))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> AlignerModel:
        return cls.from_bytes(Path(path).read_bytes())


def predict(model, o_live, o_goal) -> Displacement4:
    return model.predict(o_live, o_goal)


def training_pairs(buf: MemoryBuffer, extractor_id: str, goal_conditioned: bool = True):
    """Inputs (live, goal) descriptor pairs and Displacement4 targets over same-object samples."""
    if len(buf) == 0:
        raise EmptyBufferError("cannot train on an empty buffer")
    keys, mat = buf.embedding_matrix(extractor_id)
    row = {k: i for i, k in enumerate(keys)}
    X, Y = [], []
    for d in buf.demos:
        goal = mat[row[(d.demo_id, -1)]]
        for i, s in enumerate(d.samples):
            live = mat[row[(d.demo_id, i)]]
            X.append(np.concatenate([live, goal]) if goal_conditioned else live)
            Y.append(s.label.as_array())
    return np.array(X), np.array(Y)


def fit_pairs(X, Y, cfg: TrainConfig, extractor_id: str, goal_conditioned: bool = True) -> AlignerModel:
    res = mlp.fit(X, Y, cfg.hidden, cfg.sgd())
    return AlignerModel(extractor_id, res.model, cfg.seed, goal_conditioned, res.train_loss, res.val_loss)


def train(buf: MemoryBuffer, cfg: TrainConfig = TrainConfig(), extractor_id: str = "moments",
          goal_conditioned: bool = True) -> AlignerModel:
    if len(buf) == 0:
        raise EmptyBufferError("cannot train on an empty buffer")
    if sum(len(d.samples) for d in buf.demos) < 2:
        raise ValueError("training needs at least two alignment samples")
    if extractor_id not in buf.embeddings:
        buf.compute_embeddings(extractor_id)
    X, Y = training_pairs(buf, extractor_id, goal_conditioned)
    return fit_pairs(X, Y, cfg, extractor_id, goal_conditioned)


def gradient_check(model: AlignerModel | mlp.MLP, sample=None, n_coords: int = 200, seed: int = 0,
                   angle_weight: float = 0.25) -> float:
    """Max relative backprop error against central differences (h = 1e-5)."""
    net = model.regressor.net if isinstance(model, AlignerModel) else model
    rng = np.random.default_rng(seed)
    if sample is None:
        x = rng.standard_normal((1, net.sizes[0]))
        y = rng.standard_normal((1, net.sizes[-1]))
    else:
        x, y = sample
    w = (1.0, 1.0, 1.0, angle_weight) if net.sizes[-1] == 4 else None
    return mlp.gradient_check(net, x, y, w, n_coords=n_coords, seed=seed)


def random_model(seed: int = 0, extractor_id: str = "moments", hidden=HIDDEN) -> AlignerModel:
    dim = features.get_extractor(extractor_id).dim
    rng = np.random.default_rng(seed)
    net = mlp.MLP.init((2 * dim,) + tuple(hidden) + (4,), rng)
    # nonzero biases so every parameter group is exercised
    for b in net.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    reg = mlp.Regressor(net, mlp.Standardizer.identity(2 * dim), mlp.Standardizer.identity(4))
    return AlignerModel(extractor_id, reg, seed)


class OracleAligner:
    """Exact displacement from the camera pose carried by the live observation to ``bottleneck``."""

    goal_conditioned = True
    input_descriptor = None

    def __init__(self, bottleneck: Pose):
        self.bottleneck = bottleneck.with_frames(Frame.WORLD, Frame.END_EFFECTOR)

    def predict(self, o_live, o_goal=None) -> Displacement4:
        ee = compose(o_live.camera_pose.with_frames(Frame.WORLD, None), inverse(W.MOUNT).with_frames(Frame.CAMERA, None))
        return displacement_to_bottleneck(ee.with_frames(Frame.WORLD, Frame.END_EFFECTOR), self.bottleneck)


@dataclass
class ServoTrace:
    poses: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        """Executed motions."""
        return len(self.poses) - 1

    def to_json(self) -> dict:
        return {
            "converged": bool(self.converged),
            "iterations": self.iterations,
            "poses": [[*map(float, p.position), *map(float, p.orientation)] for p in self.poses],
            "predictions": [list(map(float, d.as_array())) for d in self.predictions],
        }


def clamp_displacement(d: Displacement4, max_translation: float | None) -> Displacement4:
    if max_translation is None or d.translation_norm <= max_translation:
        return d
    s = max_translation / d.translation_norm
    return Displacement4(d.dx * s, d.dy * s, d.dz * s, d.dtheta_z)


def servo(world: W.WorldState, model, o_goal, cfg: ServoConfig = ServoConfig(),
          render=W.render) -> tuple[W.WorldState, ServoTrace]:
    """Render, predict, move; stop once the prediction is inside (gamma, gamma_theta)."""
    trace = ServoTrace()
    while True:
        o = render(world)
        try:
            d = model.predict(o, o_goal)
        except features.FeatureError:
            # nothing in view: no usable prediction, stop unconverged
            trace.poses.append(world.end_effector)
            return world, trace
        trace.poses.append(world.end_effector)
        trace.predictions.append(d)
        if d.translation_norm < cfg.gamma and abs(d.dtheta_z) < cfg.gamma_theta:
            trace.converged = True
            return world, trace
        if trace.iterations >= cfg.max_iters:
            return world, trace
        d = clamp_displacement(d, cfg.max_translation)
        if cfg.step_scale != 1.0:
            d = d.scaled(cfg.step_scale)
        world = W.with_ee(world, apply_displacement(world.end_effector, d))


def geometric_bound(d0: float, dtheta0: float, cfg: ServoConfig) -> int:
    """Iteration bound for a damped exact servo, ceil(log2(max ratio)) + 1."""
    ratio = max(d0 / cfg.gamma, abs(dtheta0) / cfg.gamma_theta, 1.0)
    return int(math.ceil(math.log2(ratio))) + 1
