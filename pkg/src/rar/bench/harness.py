"""Experiment runner: train every method on the train split, evaluate on seed-matched test worlds."""

from __future__ import annotations

import math
import multiprocessing
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..align import servo
from ..act import replay
from ..config import SPLITS, RunConfig
from ..geometry import PlanarPose4
from ..scene import world as W
from ..scene.objects import ObjectLibrary, default_library
from .methods import DemoSet, collect_demos, make_method
from .policies import rollout


def load_library(cfg: RunConfig) -> ObjectLibrary:
    lib = ObjectLibrary.load(cfg["library"]) if cfg["library"] else default_library(cfg["library_seed"])
    names = cfg["objects"]
    if names is not None:
        known = {o.name for _, o in lib.all()}
        missing = sorted(set(names) - known)
        if missing:
            raise KeyError("objects not in library: %s" % ", ".join(missing))
        keep = set(names)
        lib = ObjectLibrary(*[[o for o in lib.split(s) if o.name in keep] for s in SPLITS])
    return lib


def test_pose(seed: int, split: str, obj_index: int, trial: int, cfg: RunConfig) -> PlanarPose4:
    """Placement for one episode, a pure function of its indices so every method sees it."""
    rng = np.random.default_rng([seed, SPLITS.index(split), obj_index, trial])
    pl = cfg["placement"]
    x, y = rng.uniform(-pl["xy"], pl["xy"], size=2)
    yaw = rng.uniform(-math.radians(pl["yaw_deg"]), math.radians(pl["yaw_deg"]))
    return PlanarPose4(float(x), float(y), 0.0, float(yaw))


@dataclass
class EpisodeRecord:
    method: str
    split: str
    object: str
    trial: int
    pose: tuple
    success: bool
    steps: int
    cause: str | None = None
    task_inferred: str | None = None


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    episodes: list = field(default_factory=list)
    wall_time: float = 0.0
    traces: list = field(default_factory=list, repr=False)  # (episode index, EpisodeResult JSON)

    def methods(self) -> list:
        return list(dict.fromkeys(e.method for e in self.episodes))

    def rows(self) -> list:
        """(method, split, object, trials, successes) in episode order."""
        table = {}
        for e in self.episodes:
            key = (e.method, e.split, e.object)
            t, s = table.get(key, (0, 0))
            table[key] = (t + 1, s + int(e.success))
        return [(*k, t, s) for k, (t, s) in table.items()]

    def aggregates(self) -> list:
        """(method, split, trials, successes) per split, plus split 'all'."""
        out = []
        for m in self.methods():
            eps = [e for e in self.episodes if e.method == m]
            for split in [s for s in SPLITS if any(e.split == s for e in eps)] + ["all"]:
                sel = [e for e in eps if split in ("all", e.split)]
                out.append((m, split, len(sel), sum(e.success for e in sel)))
        return out

    def rate(self, method: str, split: str = "all") -> float:
        for m, s, t, k in self.aggregates():
            if m == method and s == split:
                return k / t
        raise KeyError((method, split))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "episodes": [asdict(e) for e in self.episodes],
            "rows": [dict(zip(("method", "split", "object", "trials", "successes"), r)) for r in self.rows()],
            "aggregates": [dict(zip(("method", "split", "trials", "successes"), a)) for a in self.aggregates()],
        }

    @classmethod
    def from_json(cls, d: dict) -> ExperimentReport:
        eps = [EpisodeRecord(**{**e, "pose": tuple(e["pose"])}) for e in d["episodes"]]
        return cls(d["config"], d["seed"], eps)


# -- worker pool ---------------------------------------------------------------------

_ACTIVE = {}


def _run_case(case) -> tuple:
    method = _ACTIVE["method"]
    split, obj_index, spec, trial, pose = case
    out = method.act(W.setup_world(spec, pose))
    rec = EpisodeRecord(method.id, split, spec.name, trial, (pose.x, pose.y, pose.theta_z), bool(out.success),
                        int(out.steps), out.cause, out.task)
    return rec, out.trace


def worker_count(requested: int | None) -> int:
    if os.environ.get("RAR_NO_PARALLEL") == "1":
        return 1
    return requested or os.cpu_count() or 1


def _map_cases(method, cases, workers: int) -> list:
    """Ordered map; forked workers inherit the trained method instead of pickling it."""
    _ACTIVE["method"] = method
    try:
        if workers <= 1 or len(cases) < 2 or "fork" not in multiprocessing.get_all_start_methods():
            return [_run_case(c) for c in cases]
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers) as pool:
            return pool.map(_run_case, cases, chunksize=max(1, len(cases) // (4 * workers)))
    finally:
        _ACTIVE.clear()


def test_cases(lib: ObjectLibrary, cfg: RunConfig) -> list:
    cases = []
    for split in cfg["splits"]:
        for i, spec in enumerate(lib.split(split)):
            for t in range(cfg["trials"]):
                cases.append((split, i, spec, t, test_pose(cfg["seed"], split, i, t, cfg)))
    return cases


def run_experiment(cfg: RunConfig, library: ObjectLibrary | None = None, demos: DemoSet | None = None,
                   log=None, aligner=None, dump_obs: bool = False) -> ExperimentReport:
    """Train every configured method on ``demos`` and run it on the shared test cases.

    A given ``aligner`` replaces training for "ours".
    """
    t0 = time.perf_counter()
    lib = library if library is not None else load_library(cfg)
    if demos is None:
        demos = collect_demos(lib.train, cfg, cfg["seed"])
    cases = test_cases(lib, cfg)
    workers = worker_count(cfg["workers"])
    episodes, traces = [], []
    for mid in cfg["methods"]:
        m = make_method(mid, cfg)
        if mid == "ours":
            m.dump_obs = dump_obs
            m.train(demos, aligner)
        else:
            m.train(demos)
        out = _map_cases(m, cases, workers)
        recs = [r for r, _ in out]
        if log:
            log("%s: %d/%d successes" % (mid, sum(r.success for r in recs), len(recs)))
        traces += [(len(episodes) + i, t) for i, (_, t) in enumerate(out) if t is not None]
        episodes += recs
    return ExperimentReport(cfg.result_doc(), cfg["seed"], episodes, time.perf_counter() - t0, traces)


# -- seed sweeps -------------------------------------------------------------------

@dataclass
class RateSummary:
    mean: float
    se: float
    values: tuple

    @classmethod
    def of(cls, values) -> RateSummary:
        v = np.asarray(values, dtype=float)
        se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
        return cls(float(v.mean()), se, tuple(float(x) for x in v))

    def clearly_below(self, other: RateSummary) -> bool:
        """True when the +-1 SE intervals do not overlap and this one is lower."""
        return self.mean + self.se < other.mean - other.se


def summarize(reports, method: str, split: str = "all") -> RateSummary:
    return RateSummary.of([r.rate(method, split) for r in reports])


def seed_sweep(cfg: RunConfig, seeds, library: ObjectLibrary | None = None, log=None) -> list:
    return [run_experiment(cfg.replace(seed=int(s)), library, log=log) for s in seeds]


def ordering_violations(summaries: dict, order) -> list:
    """Pairs (better, worse) of ``order`` where 'better' is clearly below 'worse'."""
    order = list(order)
    return [(a, b) for i, a in enumerate(order) for b in order[i + 1:] if summaries[a].clearly_below(summaries[b])]


# -- replay against a learned interaction policy -------------------------------------

@dataclass
class TaskComparison:
    task: str
    object: str
    trials: int
    replay_successes: int
    policy_successes: int
    servo_converged: int


def replay_vs_policy(cfg: RunConfig, library: ObjectLibrary | None = None, demos: DemoSet | None = None,
                     aligner=None) -> list:
    """Per training object: servo once with the goal-conditioned aligner to the
    object's own demo, then run both the recorded replay and a cloned
    interaction policy from the same aligned state."""
    from .. import align

    lib = library if library is not None else load_library(cfg)
    if demos is None:
        demos = collect_demos(lib.train, cfg, cfg["seed"])
    if aligner is None:
        aligner = align.train(demos.buffer, cfg.train_config(), cfg["aligner_extractor"])
    policy = make_method("bc", cfg)._policy().fit(demos.interaction_streams())
    servo_cfg = cfg.servo_config()
    out = []
    for i, spec in enumerate(lib.train):
        demo = next(d for d in demos.demos if d.spec.name == spec.name)
        rec = demo.record
        k_replay = k_policy = k_conv = 0
        for t in range(cfg["trials"]):
            world = W.setup_world(spec, test_pose(cfg["seed"], "train", i, t, cfg))
            aligned, trace = servo(world, aligner, rec.bottleneck_obs, servo_cfg)
            k_conv += trace.converged
            end = replay(aligned, rec.trajectory, rec.dt)
            k_replay += W.check_success(end, spec.task)
            k_policy += rollout(aligned, policy, rec.dt, cfg["max_steps"]).success
        out.append(TaskComparison(spec.task, spec.name,
                                  cfg["trials"], k_replay, k_policy, k_conv))
    return out


# -- retrieval accuracy -----------------------------------------------------------

@dataclass
class RetrievalAccuracy:
    extractor: str
    queries: int
    correct: int
    matches_brute_force: bool

    @property
    def accuracy(self) -> float:
        return self.correct / self.queries if self.queries else 0.0


def query_views(spec, cfg: RunConfig, n_views: int, seed: int) -> list:
    """Observations of ``spec`` from the start pose and from random poses around its bottleneck."""
    from ..teach import bottleneck_world, canonical_script, sample_pose

    rng = np.random.default_rng([seed, 99])
    coll = cfg.collection(0)
    views = []
    for v in range(n_views):
        world = W.setup_world(spec, W.sample_test_pose(spec, rng))
        if v > 0:
            b = bottleneck_world(world, canonical_script(spec))
            world = W.with_ee(world, sample_pose(b, coll, rng))
        views.append(W.render(world))
    return views


def _scan(keys, rows, e) -> tuple:
    """Exhaustive argmax, one similarity at a time, first maximum wins."""
    best_key, best = None, -np.inf
    for key, row in zip(keys, rows):
        s = float(np.dot(row, e))
        if s > best:
            best_key, best = key, s
    return best_key, best


def retrieval_accuracy(buf, test_objects, extractors, cfg: RunConfig | None = None, n_views: int = 10,
                       seed: int = 0, views: dict | None = None) -> dict:
    """Fraction of held-out views whose top match is a demo of the same object class.

    Each query is also checked against an exhaustive scan over embeddings
    recomputed from the stored observations.
    """
    from .. import features

    cfg = cfg or RunConfig()
    if views is None:
        views = {spec.name: query_views(spec, cfg, n_views, seed + j) for j, spec in enumerate(test_objects)}
    out = {}
    for ext in extractors:
        if ext not in buf.embeddings:
            buf.compute_embeddings(ext)
        x = features.get_extractor(ext)
        keys = buf.keys()
        rows = [features.extract(x, o).values for d in buf.demos for o in d.observations()]
        n = k = 0
        same = True
        for spec in test_objects:
            for o in views[spec.name]:
                r = buf.query(o, ext)
                key, score = _scan(keys, rows, features.extract(x, o).values)
                same &= key == r.matched_key and abs(score - r.score) <= 1e-12
                n += 1
                k += buf.train_meta(r.demo_id).class_id == spec.class_id
        out[ext] = RetrievalAccuracy(ext, n, k, bool(same))
    return out
