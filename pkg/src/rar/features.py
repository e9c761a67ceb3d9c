"""Observation descriptors and cosine similarity.

Built-in extractors are deterministic hand-made descriptors. Embeddings
computed elsewhere (e.g. by a pretrained network) can be imported through
the binary embedding file format and live under ``external:<name>`` ids.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .scene.world import Observation

EMB_MAGIC = b"RAREMB1"
RANDOM_PROJECTION_SEED = 0xD1A0


class FeatureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    extractor_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _unit(v: np.ndarray, what: str = "descriptor") -> np.ndarray:
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n == 0.0:
        raise FeatureError("cannot normalize zero or non-finite %s" % what)
    return v / n


def _check(o: Observation) -> None:
    if o.rgb.shape != (128, 128, 3) or o.depth.shape != (128, 128):
        raise FeatureError("observation must be 128x128 RGBD")


def grayscale(o: Observation) -> np.ndarray:
    return o.rgb.astype(np.float64).mean(axis=2) / 255.0


def scaled_depth(o: Observation) -> np.ndarray:
    """Depth min-max scaled to [0, 1] over the image; a flat image maps to zeros."""
    d = o.depth.astype(np.float64)
    lo, hi = d.min(), d.max()
    if hi - lo < 1e-12:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def block_mean(img: np.ndarray, out: int) -> np.ndarray:
    h, w = img.shape
    return img.reshape(out, h // out, out, w // out).mean(axis=(1, 3))


class FeatureExtractor:
    id: str = ""
    dim: int = 0
    deterministic: bool = True

    def features(self, o: Observation) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, o: Observation) -> Embedding:
        return extract(self, o)


class PatchDescriptor(FeatureExtractor):
    """Grayscale and scaled depth, each block-averaged to 16x16 (dim 512).

    With ``channels="rgb"`` the depth half is dropped (dim 256).
    """

    def __init__(self, channels: str = "rgbd", grid: int = 16):
        if channels not in ("rgbd", "rgb"):
            raise FeatureError("channels must be 'rgbd' or 'rgb'")
        self.channels = channels
        self.grid = grid
        self.id = "patch" if channels == "rgbd" else "patch:rgb"
        self.dim = grid * grid * (2 if channels == "rgbd" else 1)

    def features(self, o):
        parts = [block_mean(grayscale(o), self.grid).ravel()]
        if self.channels == "rgbd":
            parts.append(block_mean(scaled_depth(o), self.grid).ravel())
        return np.concatenate(parts)


class RandomProjection(FeatureExtractor):
    """Fixed-seed Gaussian projection of the raw 128x128x4 pixels to 256 dims."""

    id = "randproj"
    dim = 256

    def __init__(self, seed: int = RANDOM_PROJECTION_SEED, dim: int = 256):
        self.seed = seed
        self.dim = dim

    @cached_property
    def matrix(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal((128 * 128 * 4, self.dim), dtype=np.float32)

    def features(self, o):
        x = np.concatenate([o.rgb.astype(np.float32).reshape(-1, 3) / 255.0,
                            scaled_depth(o).astype(np.float32).reshape(-1, 1)], axis=1).ravel()
        return (x @ self.matrix).astype(np.float64)


class GradientHistogram(FeatureExtractor):
    """8-bin magnitude-weighted orientation histograms on an 8x8 cell grid (dim 512).

    Gradients of grayscale and scaled depth vote into the same bins.
    """

    id = "hog"
    dim = 512
    bins = 8
    cells = 8

    def features(self, o):
        hist = np.zeros((self.cells, self.cells, self.bins))
        for img in (grayscale(o), scaled_depth(o)):
            gy, gx = np.gradient(img)
            mag = np.hypot(gx, gy)
            ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
            b = np.minimum((ang / (2 * np.pi) * self.bins).astype(int), self.bins - 1)
            cs = 128 // self.cells
            ci = np.arange(128) // cs
            rows, cols = np.meshgrid(ci, ci, indexing="ij")
            np.add.at(hist, (rows.ravel(), cols.ravel(), b.ravel()), mag.ravel())
        return hist.ravel()


class ShapeMoments(FeatureExtractor):
    """Low-order image moments of the depth-segmented foreground (dim 41).

    The table is the farthest surface in a top-down view; pixels more than
    3 mm above it, and beyond the gripper's near field, form the foreground
    mask. Five weightings (mask, bright,
    dark, height above table, visible table) each contribute mass, centroid
    and second central moments. Unit vectors from the mask centroid to the
    bright and dark centroids, and the principal-axis direction of the mask
    and dark weightings, carry orientation. The table and median foreground
    depths carry height. A leading constant keeps the overall scale
    recoverable after normalization.
    """

    id = "moments"
    dim = 41
    foreground_height = 0.003
    near_field = 0.12

    def features(self, o):
        d = o.depth.astype(np.float64)
        g = grayscale(o)
        valid = d > 0
        if not valid.any():
            return np.zeros(self.dim)
        far = d[valid].max()
        m, h = foreground_mask(o, self.foreground_height, self.near_field)
        mask = m.astype(np.float64)
        n = d.shape[0]
        u = (np.arange(n) + 0.5) / n * 2 - 1
        U, V = np.meshgrid(u, u)
        near = float(np.median(d[mask > 0])) if mask.any() else far
        out = [1.0, far, near]
        stats = []
        for w in (mask, mask * g, mask * (1 - g), h / 0.3, (1 - mask) * valid):
            m0 = w.sum()
            if m0 < 1e-9:
                out += [0.0] * 6
                stats.append((0.0,) * 5)
                continue
            cx = (w * U).sum() / m0
            cy = (w * V).sum() / m0
            xx = (w * (U - cx) ** 2).sum() / m0
            yy = (w * (V - cy) ** 2).sum() / m0
            xy = (w * (U - cx) * (V - cy)).sum() / m0
            out += [m0 / (n * n), cx, cy, xx, yy, xy]
            stats.append((cx, cy, xx, yy, xy))
        for k in (1, 2):
            dx, dy = stats[k][0] - stats[0][0], stats[k][1] - stats[0][1]
            r = math.hypot(dx, dy) + 1e-9
            out += [dx / r, dy / r]
        for k in (0, 2):
            xx, yy, xy = stats[k][2:]
            a = math.hypot(xx - yy, 2 * xy) + 1e-12
            out += [(xx - yy) / a, 2 * xy / a]
        return np.array(out)


def foreground_mask(o: Observation, min_height: float = 0.003, near_field: float = 0.12):
    """(mask, height above table) for a top-down view; the table is the farthest surface."""
    d = o.depth.astype(np.float64)
    valid = d > 0
    if not valid.any():
        return np.zeros(d.shape, bool), np.zeros(d.shape)
    h = np.where(valid, np.clip(d[valid].max() - d, 0.0, None), 0.0)
    return (h > min_height) & (d > near_field), h


class ForegroundHistogram(FeatureExtractor):
    """Color (4x4x4 RGB bins) and height-above-table (8 bins up to 0.24 m)
    histograms of the foreground, as fractions of foreground pixels (dim 72).

    Position and orientation invariant, unlike the patch descriptor.
    """

    id = "colorhist"
    dim = 72
    max_height = 0.24

    def features(self, o):
        mask, h = foreground_mask(o)
        if not mask.any():
            return np.zeros(self.dim)
        rgb = o.rgb[mask].astype(np.int64) // 64
        color = np.bincount(rgb[:, 0] * 16 + rgb[:, 1] * 4 + rgb[:, 2], minlength=64)
        hb = np.minimum((h[mask] / self.max_height * 8).astype(np.int64), 7)
        height = np.bincount(hb, minlength=8)
        return np.concatenate([color, height]).astype(np.float64) / mask.sum()


BUILTIN = {
    "patch": PatchDescriptor,
    "patch:rgb": lambda: PatchDescriptor("rgb"),
    "randproj": RandomProjection,
    "hog": GradientHistogram,
    "moments": ShapeMoments,
    "colorhist": ForegroundHistogram,
}

_cache: dict[str, FeatureExtractor] = {}


def get_extractor(extractor_id: str) -> FeatureExtractor:
    if extractor_id not in BUILTIN:
        raise FeatureError("unknown extractor %r (built-in: %s)" % (extractor_id, ", ".join(BUILTIN)))
    if extractor_id not in _cache:
        _cache[extractor_id] = BUILTIN[extractor_id]()
    return _cache[extractor_id]


def extract(x: FeatureExtractor, o: Observation) -> Embedding:
    _check(o)
    v = np.asarray(x.features(o), dtype=np.float64)
    if v.shape != (x.dim,):
        raise FeatureError("%s produced shape %s, expected (%d,)" % (x.id, v.shape, x.dim))
    return Embedding(_unit(v), x.id)


def extract_many(x: FeatureExtractor, observations) -> np.ndarray:
    """Stack of unit embeddings, one row per observation."""
    if not observations:
        return np.zeros((0, x.dim))
    return np.stack([extract(x, o).values for o in observations])


def similarity(a: Embedding, b: Embedding) -> float:
    if a.extractor_id != b.extractor_id:
        raise FeatureError("extractor mismatch: %s vs %s" % (a.extractor_id, b.extractor_id))
    if a.dim != b.dim:
        raise FeatureError("dimension mismatch: %d vs %d" % (a.dim, b.dim))
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise FeatureError("similarity of a zero embedding is undefined")
    s = float(np.dot(a.values, b.values)) / (na * nb)
    return max(-1.0, min(1.0, s))


# -- embedding files ---------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FeatureError("truncated embedding file while reading %s" % what)
    return b


def _read_str(f, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4, what))
    return _read_exact(f, n, what).decode("utf-8")


def export_embeddings(path, extractor_id: str, items: dict) -> None:
    """Write ``{key: vector}`` as little-endian float32 records."""
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in items.values()]
    dim = vecs[0].shape[0] if vecs else 0
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    buf.write(_pack_str(extractor_id))
    buf.write(struct.pack("<IQ", dim, len(items)))
    for i, (key, v) in enumerate(zip(items, vecs)):
        if v.shape[0] != dim:
            raise FeatureError("record %d has dimension %d, expected %d" % (i, v.shape[0], dim))
        buf.write(_pack_str(str(key)))
        buf.write(v.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def import_embeddings(path, name: str | None = None) -> dict[str, Embedding]:
    """Load an embedding file; vectors are normalized and tagged ``external:<name>``."""
    with open(path, "rb") as f:
        magic = f.read(len(EMB_MAGIC))
        if magic != EMB_MAGIC:
            raise FeatureError("not an embedding file (bad magic %r)" % magic)
        file_id = _read_str(f, "header")
        dim, count = struct.unpack("<IQ", _read_exact(f, 12, "header"))
        if dim == 0:
            raise FeatureError("embedding dimension must be positive")
        ext_id = "external:%s" % (name or file_id.removeprefix("external:"))
        out = {}
        for i in range(count):
            try:
                key = _read_str(f, "record %d" % i)
                raw = np.frombuffer(_read_exact(f, 4 * dim, "record %d" % i), dtype="<f4")
            except (FeatureError, UnicodeDecodeError) as e:
                raise FeatureError("record %d: %s" % (i, e)) from e
            v = raw.astype(np.float64)
            if not np.all(np.isfinite(v)):
                raise FeatureError("record %d: non-finite values" % i)
            try:
                out[key] = Embedding(_unit(v, "vector"), ext_id)
            except FeatureError as e:
                raise FeatureError("record %d: %s" % (i, e)) from e
        if f.read(1):
            raise FeatureError("trailing bytes after %d records" % count)
    return out


def read_raw_embeddings(path) -> tuple[str, dict[str, np.ndarray]]:
    """Unnormalized float32 payload, for round-trip checks."""
    with open(path, "rb") as f:
        if f.read(len(EMB_MAGIC)) != EMB_MAGIC:
            raise FeatureError("bad magic")
        file_id = _read_str(f, "header")
        dim, count = struct.unpack("<IQ", _read_exact(f, 12, "header"))
        out = {}
        for i in range(count):
            key = _read_str(f, "record %d" % i)
            out[key] = np.frombuffer(_read_exact(f, 4 * dim, "record %d" % i), dtype="<f4").copy()
    return file_id, out


class ImportedEmbeddings(FeatureExtractor):
    """Lookup extractor over an imported embedding table.

    Observations are matched by a caller-supplied key function, since an
    offline network cannot be rerun here.
    """

    deterministic = True

    def __init__(self, table: dict[str, Embedding], key_fn):
        if not table:
            raise FeatureError("empty embedding table")
        first = next(iter(table.values()))
        self.id = first.extractor_id
        self.dim = first.dim
        self.table = table
        self.key_fn = key_fn

    def features(self, o):
        key = self.key_fn(o)
        if key not in self.table:
            raise FeatureError("no imported embedding for key %r" % (key,))
        return self.table[key].values
