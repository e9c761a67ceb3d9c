"""The memory buffer: demonstrations, alignment data, embeddings, retrieval."""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import features
from .geometry import Displacement4, Frame, Pose, Twist, displacement_to_bottleneck
from .scene.objects import ObjectSpec
from .scene.world import CLOSED, OPEN, Observation

BUF_MAGIC = b"RARBUF1"
BUF_VERSION = 1
BOTTLENECK = -1  # sample index used for the bottleneck observation key

_EVENT_CODE = {None: 0, OPEN: 1, CLOSED: 2}
_EVENT_NAME = {v: k for k, v in _EVENT_CODE.items()}


class BufferError(ValueError):
    pass


class BufferVersionError(BufferError):
    pass


class EmptyBufferError(BufferError):
    pass


class MissingEmbeddingsError(BufferError):
    pass


@dataclass(frozen=True, eq=False)
class AlignmentSample:
    observation: Observation
    label: Displacement4
    pose: Pose | None = None  # debug metadata: where the observation was taken


@dataclass(frozen=True, eq=False)
class DemoRecord:
    task: str
    bottleneck_obs: Observation
    samples: tuple
    trajectory: tuple  # of (Twist, gripper event or None)
    dt: float
    demo_id: int | None = None
    object_meta: ObjectSpec | None = None
    bottleneck_pose: Pose | None = None
    object_pose: Pose | None = None

    def __post_init__(self):
        if not self.trajectory:
            raise BufferError("demo trajectory is empty")
        if not self.samples:
            raise BufferError("demo needs at least one alignment sample")
        for tw, ev in self.trajectory:
            if tw.frame != Frame.END_EFFECTOR:
                raise BufferError("trajectory twists must be end-effector frame")
            if ev not in _EVENT_CODE:
                raise BufferError("bad gripper event %r" % (ev,))
        if not self.dt > 0:
            raise BufferError("dt must be positive")

    def observations(self) -> list:
        return [self.bottleneck_obs] + [s.observation for s in self.samples]

    def keys(self) -> list:
        return [(self.demo_id, BOTTLENECK)] + [(self.demo_id, i) for i in range(len(self.samples))]


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    demo_id: int
    matched_key: tuple
    score: float
    bottleneck_obs: Observation
    trajectory: tuple
    task: str
    dt: float


class MemoryBuffer:
    """Append-only store. ``object_meta`` is held in a train-only table that
    the retrieval path never touches; stored DemoRecords carry no meta."""

    def __init__(self, extractors=("patch",)):
        self.demos: list[DemoRecord] = []
        self._train_meta: dict[int, ObjectSpec | None] = {}
        self.extractor_ids: tuple = tuple(extractors)
        # extractor id -> (keys, matrix of unit rows)
        self.embeddings: dict[str, tuple[list, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.demos)

    @property
    def observation_count(self) -> int:
        return sum(1 + len(d.samples) for d in self.demos)

    def keys(self) -> list:
        return [k for d in self.demos for k in d.keys()]

    def demo(self, demo_id: int) -> DemoRecord:
        return self.demos[self._index[demo_id]]

    @property
    def _index(self) -> dict:
        return {d.demo_id: i for i, d in enumerate(self.demos)}

    def train_meta(self, demo_id: int) -> ObjectSpec | None:
        """Training/evaluation only; deployment code must not call this."""
        return self._train_meta[demo_id]

    def add_demo(self, rec: DemoRecord) -> MemoryBuffer:
        ids = self._index
        if rec.demo_id is None:
            rec = replace(rec, demo_id=max(ids, default=-1) + 1)
        elif rec.demo_id in ids:
            raise BufferError("duplicate demo_id %d" % rec.demo_id)
        self._train_meta[rec.demo_id] = rec.object_meta
        stored = replace(rec, object_meta=None)
        self.demos.append(stored)
        for ext_id in self.extractor_ids:
            x = features.get_extractor(ext_id)
            rows = features.extract_many(x, stored.observations())
            keys, mat = self.embeddings.get(ext_id, ([], np.zeros((0, x.dim))))
            self.embeddings[ext_id] = (keys + stored.keys(), np.vstack([mat, rows]))
        return self

    def compute_embeddings(self, extractor) -> None:
        """(Re)compute embeddings of every stored observation for one extractor."""
        x = features.get_extractor(extractor) if isinstance(extractor, str) else extractor
        obs = [o for d in self.demos for o in d.observations()]
        self.embeddings[x.id] = (self.keys(), features.extract_many(x, obs))
        if x.id not in self.extractor_ids:
            self.extractor_ids = self.extractor_ids + (x.id,)

    def register_embeddings(self, extractor_id: str, table: dict) -> None:
        """Attach precomputed embeddings keyed by ``"d:i"`` strings (i = -1 for bottlenecks)."""
        keys = self.keys()
        rows = []
        for d, i in keys:
            k = "%d:%d" % (d, i)
            if k not in table:
                raise MissingEmbeddingsError("imported embeddings for %s lack key %s" % (extractor_id, k))
            rows.append(table[k].values)
        self.embeddings[extractor_id] = (keys, np.stack(rows))

    def embedding_matrix(self, extractor_id: str) -> tuple[list, np.ndarray]:
        if extractor_id not in self.embeddings:
            raise MissingEmbeddingsError("no embeddings computed for extractor %r" % extractor_id)
        keys, mat = self.embeddings[extractor_id]
        if len(keys) != self.observation_count:
            raise MissingEmbeddingsError("embeddings for %r are stale" % extractor_id)
        return keys, mat

    def query(self, o_live: Observation, extractor_id: str = "patch",
              embedding: features.Embedding | None = None) -> RetrievalResult:
        if not self.demos:
            raise EmptyBufferError("cannot query an empty buffer")
        keys, mat = self.embedding_matrix(extractor_id)
        if embedding is None:
            embedding = features.extract(features.get_extractor(extractor_id), o_live)
        if embedding.dim != mat.shape[1]:
            raise features.FeatureError("query dimension %d != stored %d" % (embedding.dim, mat.shape[1]))
        scores = np.clip(mat @ embedding.values, -1.0, 1.0)
        # argmax returns the first maximum; keys are stored in lexicographic order
        j = int(np.argmax(scores))
        d, _ = keys[j]
        rec = self.demo(d)
        return RetrievalResult(d, keys[j], float(scores[j]), rec.bottleneck_obs, rec.trajectory, rec.task, rec.dt)

    def top_k(self, o_live: Observation, extractor_id: str = "patch", k: int = 5) -> list:
        keys, mat = self.embedding_matrix(extractor_id)
        e = features.extract(features.get_extractor(extractor_id), o_live)
        scores = np.clip(mat @ e.values, -1.0, 1.0)
        order = np.lexsort((np.arange(len(scores)), -scores))[:k]
        return [(keys[j], float(scores[j])) for j in order]

    # -- persistence ---------------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(BUF_MAGIC)
        out.write(struct.pack("<II", BUF_VERSION, len(self.demos)))
        for d in self.demos:
            _write_demo(out, d)
        for d in self.demos:
            meta = self._train_meta.get(d.demo_id)
            _write_str(out, json.dumps(meta.to_json(), sort_keys=True) if meta is not None else "")
        out.write(struct.pack("<I", len(self.embeddings)))
        for ext_id in sorted(self.embeddings):
            keys, mat = self.embeddings[ext_id]
            _write_str(out, ext_id)
            out.write(struct.pack("<IQ", mat.shape[1], mat.shape[0]))
            out.write(np.asarray(keys, dtype="<i4").reshape(-1, 2).tobytes())
            out.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
        _write_str(out, json.dumps(list(self.extractor_ids)))
        body = out.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> MemoryBuffer:
        if data[:len(BUF_MAGIC)] != BUF_MAGIC:
            raise BufferVersionError("not a buffer file (bad magic %r)" % data[:len(BUF_MAGIC)])
        if len(data) < len(BUF_MAGIC) + 12:
            raise BufferError("truncated buffer file")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        f = io.BytesIO(body)
        f.read(len(BUF_MAGIC))
        version, n = struct.unpack("<II", _read(f, 8))
        if version != BUF_VERSION:
            raise BufferVersionError("unsupported buffer version %d" % version)
        if zlib.crc32(body) != crc:
            raise BufferError("checksum mismatch (file truncated or corrupt)")
        buf = cls(extractors=())
        for _ in range(n):
            buf.demos.append(_read_demo(f))
        for d in buf.demos:
            s = _read_str(f)
            buf._train_meta[d.demo_id] = ObjectSpec.from_json(json.loads(s)) if s else None
        (n_ext,) = struct.unpack("<I", _read(f, 4))
        for _ in range(n_ext):
            ext_id = _read_str(f)
            dim, count = struct.unpack("<IQ", _read(f, 12))
            keys = np.frombuffer(_read(f, 8 * count), dtype="<i4").reshape(-1, 2)
            mat = np.frombuffer(_read(f, 8 * dim * count), dtype="<f8").reshape(count, dim).copy()
            buf.embeddings[ext_id] = ([(int(a), int(b)) for a, b in keys], mat)
        buf.extractor_ids = tuple(json.loads(_read_str(f)))
        if f.read(1):
            raise BufferError("trailing bytes in buffer file")
        return buf

    @classmethod
    def load(cls, path) -> MemoryBuffer:
        return cls.from_bytes(Path(path).read_bytes())


# -- binary helpers ---------------------------------------------------------------

def _read(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise BufferError("truncated buffer file")
    return b


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", _read(f, 4))
    return _read(f, n).decode("utf-8")


def _write_pose(f, p: Pose | None) -> None:
    if p is None:
        f.write(b"\x00")
        return
    f.write(b"\x01")
    f.write(struct.pack("<BB", list(Frame).index(p.frame), 255 if p.child is None else list(Frame).index(p.child)))
    f.write(np.concatenate([p.position, p.orientation]).astype("<f8").tobytes())


def _read_pose(f) -> Pose | None:
    if _read(f, 1) == b"\x00":
        return None
    fr, ch = struct.unpack("<BB", _read(f, 2))
    v = np.frombuffer(_read(f, 56), dtype="<f8")
    frames = list(Frame)
    return Pose(v[:3].copy(), v[3:].copy(), frames[fr], None if ch == 255 else frames[ch])


def _write_obs(f, o: Observation) -> None:
    f.write(np.ascontiguousarray(o.rgb, dtype=np.uint8).tobytes())
    f.write(np.ascontiguousarray(o.depth, dtype="<f4").tobytes())
    _write_pose(f, o.camera_pose)


def _read_obs(f) -> Observation:
    rgb = np.frombuffer(_read(f, 128 * 128 * 3), dtype=np.uint8).reshape(128, 128, 3).copy()
    depth = np.frombuffer(_read(f, 128 * 128 * 4), dtype="<f4").reshape(128, 128).astype(np.float32)
    return Observation(rgb, depth, _read_pose(f))


def _write_demo(f, d: DemoRecord) -> None:
    f.write(struct.pack("<i", d.demo_id))
    _write_str(f, d.task)
    f.write(struct.pack("<d", d.dt))
    _write_obs(f, d.bottleneck_obs)
    _write_pose(f, d.bottleneck_pose)
    _write_pose(f, d.object_pose)
    f.write(struct.pack("<I", len(d.samples)))
    for s in d.samples:
        _write_obs(f, s.observation)
        f.write(s.label.as_array().astype("<f8").tobytes())
        _write_pose(f, s.pose)
    f.write(struct.pack("<I", len(d.trajectory)))
    for tw, ev in d.trajectory:
        f.write(tw.as_vector().astype("<f8").tobytes())
        f.write(struct.pack("<B", _EVENT_CODE[ev]))


def _read_demo(f) -> DemoRecord:
    (demo_id,) = struct.unpack("<i", _read(f, 4))
    task = _read_str(f)
    (dt,) = struct.unpack("<d", _read(f, 8))
    b_obs = _read_obs(f)
    b_pose = _read_pose(f)
    o_pose = _read_pose(f)
    (n,) = struct.unpack("<I", _read(f, 4))
    samples = []
    for _ in range(n):
        o = _read_obs(f)
        lab = Displacement4.from_array(np.frombuffer(_read(f, 32), dtype="<f8"))
        samples.append(AlignmentSample(o, lab, _read_pose(f)))
    (m,) = struct.unpack("<I", _read(f, 4))
    traj = []
    for _ in range(m):
        v = np.frombuffer(_read(f, 48), dtype="<f8")
        (code,) = struct.unpack("<B", _read(f, 1))
        traj.append((Twist(tuple(v[:3]), tuple(v[3:])), _EVENT_NAME[code]))
    return DemoRecord(task, b_obs, tuple(samples), tuple(traj), dt, demo_id, None, b_pose, o_pose)


def brute_force_query(buf: MemoryBuffer, o_live: Observation, extractor_id: str) -> tuple[tuple, float]:
    """Reference scan: recompute every embedding and pairwise similarity from scratch."""
    x = features.get_extractor(extractor_id)
    e = features.extract(x, o_live)
    best_key, best = None, -np.inf
    for d in buf.demos:
        for key, o in zip(d.keys(), d.observations()):
            s = features.similarity(e, features.extract(x, o))
            if s > best:
                best_key, best = key, s
    return best_key, best


def label_residual(sample: AlignmentSample, bottleneck: Pose) -> float:
    """Difference between a stored label and one recomputed from the stored poses."""
    recomputed = displacement_to_bottleneck(sample.pose, bottleneck)
    return float(np.max(np.abs(recomputed.as_array() - sample.label.as_array())))
