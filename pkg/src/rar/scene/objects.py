"""Parametric object library.

Every object is a composition of primitives in its own frame (origin at the
base center, z up). Classes are built from a handful of size parameters so
that unseen intra-class instances can be produced by perturbing them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TASKS = ("grasp", "pour", "unscrew", "insert_cap", "insert_bread")
PRIMITIVE_KINDS = ("cylinder", "box", "sphere", "torus_segment")
MAX_EXTENT = 0.3


class LibraryError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    """One solid. ``pose`` is (x, y, z, roll, pitch, yaw) of its center in the object frame.

    Sizes: cylinder (radius, height); box (sx, sy, sz); sphere (radius,);
    torus_segment (major_radius, minor_radius, arc) with the arc lying in the
    local xy plane and centered on local +x.
    """

    kind: str
    size: tuple
    pose: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    color: tuple | None = None

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise LibraryError("unknown primitive kind %r" % self.kind)
        size = tuple(float(s) for s in self.size)
        expected = {"cylinder": 2, "box": 3, "sphere": 1, "torus_segment": 3}[self.kind]
        if len(size) != expected:
            raise LibraryError("%s needs %d size parameters, got %d" % (self.kind, expected, len(size)))
        if any(not s > 0 for s in size):
            raise LibraryError("primitive sizes must be positive: %r" % (size,))
        pose = tuple(float(v) for v in self.pose)
        if len(pose) != 6:
            raise LibraryError("primitive pose must have 6 entries")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "pose", pose)
        if self.color is not None:
            object.__setattr__(self, "color", tuple(int(c) for c in self.color))

    def bounding_radius(self) -> float:
        """Radius of a sphere around the primitive center that contains it."""
        if self.kind == "cylinder":
            r, h = self.size
            return math.hypot(r, h / 2)
        if self.kind == "box":
            return 0.5 * math.sqrt(sum(s * s for s in self.size))
        if self.kind == "sphere":
            return self.size[0]
        R, r, _ = self.size
        return R + r

    def to_json(self) -> dict:
        d = {"type": self.kind, "size": list(self.size), "pose": list(self.pose)}
        if self.color is not None:
            d["color"] = list(self.color)
        return d


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    class_id: str
    task: str
    primitives: tuple
    color: tuple
    params: tuple = ()
    role: str = "object"
    grasp_site: tuple | None = None
    mouth: tuple | None = None
    mouth_radius: float | None = None
    footprint_radius: float | None = None
    # (center_x, center_y, half_length, half_width) of the insertion slot on top
    slot: tuple | None = None
    height: float = field(default=0.0)

    def __post_init__(self):
        if self.task not in TASKS and self.role == "object":
            raise LibraryError("unknown task affinity %r for %s" % (self.task, self.name))
        if not self.primitives:
            raise LibraryError("object %s has no primitives" % self.name)
        for attr in ("grasp_site", "mouth", "slot"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, tuple(float(c) for c in v))
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))
        lo, hi = self.aabb()
        ext = hi - lo
        if np.any(ext > MAX_EXTENT + 1e-9):
            raise LibraryError("object %s exceeds the %.2f m bounding cube: %r" % (self.name, MAX_EXTENT, ext))
        object.__setattr__(self, "height", float(hi[2]))

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """Conservative axis-aligned bounds in the object frame."""
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for p in self.primitives:
            c = np.array(p.pose[:3])
            r = p.bounding_radius()
            if p.kind == "cylinder" and p.pose[3:] == (0.0, 0.0, 0.0):
                rad, h = p.size
                ext = np.array([rad, rad, h / 2])
            elif p.kind == "box" and p.pose[3:] == (0.0, 0.0, 0.0):
                ext = np.array(p.size) / 2
            else:
                ext = np.array([r, r, r])
            lo = np.minimum(lo, c - ext)
            hi = np.maximum(hi, c + ext)
        return lo, hi

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "class_id": self.class_id,
            "task": self.task,
            "role": self.role,
            "color": list(self.color),
            "params": dict(self.params),
            "primitives": [p.to_json() for p in self.primitives],
        }
        for attr in ("grasp_site", "mouth", "slot"):
            v = getattr(self, attr)
            if v is not None:
                d[attr] = list(v)
        for attr in ("mouth_radius", "footprint_radius"):
            v = getattr(self, attr)
            if v is not None:
                d[attr] = v
        return d

    @classmethod
    def from_json(cls, d: dict) -> ObjectSpec:
        prims = tuple(
            Primitive(p["type"], tuple(p["size"]), tuple(p.get("pose", (0, 0, 0, 0, 0, 0))),
                      tuple(p["color"]) if "color" in p else None)
            for p in d["primitives"]
        )
        return cls(
            name=d["name"], class_id=d["class_id"], task=d["task"], primitives=prims,
            color=tuple(d["color"]), params=tuple(sorted(d.get("params", {}).items())),
            role=d.get("role", "object"),
            grasp_site=tuple(d["grasp_site"]) if "grasp_site" in d else None,
            mouth=tuple(d["mouth"]) if "mouth" in d else None,
            mouth_radius=d.get("mouth_radius"), footprint_radius=d.get("footprint_radius"),
            slot=tuple(d["slot"]) if "slot" in d else None,
        )


# -- class builders ------------------------------------------------------------

CLASS_DEFAULTS = {
    "can": {"radius": 0.033, "height": 0.122, "tab": 0.024},
    "mug": {"radius": 0.040, "height": 0.095, "handle_radius": 0.030, "handle_thickness": 0.007},
    "bottle": {"radius": 0.034, "height": 0.150, "neck_radius": 0.014, "neck_height": 0.040},
    "bottle_open": {"radius": 0.034, "height": 0.150, "neck_radius": 0.014, "neck_height": 0.040},
    "cup": {"radius": 0.037, "height": 0.100, "spout": 0.016},
    "toaster": {"length": 0.240, "width": 0.150, "height": 0.170, "slot_length": 0.130},
    "banana": {"bend_radius": 0.120, "thickness": 0.018, "arc": 1.25},
    "teapot": {"radius": 0.055, "handle_radius": 0.032, "spout_length": 0.060},
    "jar": {"radius": 0.045, "height": 0.110, "lid_height": 0.022},
}

CLASS_TASK = {
    "can": "grasp", "mug": "grasp", "bottle": "unscrew", "bottle_open": "insert_cap",
    "cup": "pour", "toaster": "insert_bread", "banana": "grasp", "teapot": "grasp", "jar": "unscrew",
}

CLASS_COLOR = {
    "can": (205, 170, 40), "mug": (60, 90, 200), "bottle": (40, 150, 70),
    "bottle_open": (135, 60, 165), "cup": (225, 225, 215), "toaster": (165, 165, 175),
    "banana": (230, 205, 60), "teapot": (70, 105, 195), "jar": (80, 165, 120),
}

CAP_COLOR = (235, 110, 30)
DARK = (40, 40, 45)
LIGHT = (240, 240, 240)


def _stripe(r_in: float, r_out: float, z: float, width: float, color=DARK) -> Primitive:
    """Flat printed bar on a top face along +x; makes yaw visible from above."""
    return Primitive("box", (r_out - r_in, width, 0.002), ((r_in + r_out) / 2, 0, z + 0.001, 0, 0, 0), color)


def _can(p, color):
    r, h, tab = p["radius"], p["height"], p["tab"]
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0)),
        Primitive("cylinder", (0.85 * r, 0.004), (0, 0, h + 0.002, 0, 0, 0), (185, 185, 190)),
        # opening tab printed as a dark bar toward +x
        _stripe(0.1 * r, 0.1 * r + tab, h + 0.004, 0.5 * tab, DARK),
    )
    return dict(primitives=prims, grasp_site=(0.0, 0.0, h - 0.02))


def _mug(p, color):
    r, h, hr, ht = p["radius"], p["height"], p["handle_radius"], p["handle_thickness"]
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0)),
        Primitive("cylinder", (0.85 * r, 0.003), (0, 0, h + 0.0015, 0, 0, 0), DARK),
        _stripe(-0.8 * r, 0.0, h + 0.003, 0.3 * r, LIGHT),
        # handle: vertical C on the +x side
        Primitive("torus_segment", (hr, ht, 3.4), (r, 0, h / 2, math.pi / 2, 0, 0)),
    )
    return dict(primitives=prims, grasp_site=(r + hr, 0.0, h / 2))


def _bottle(p, color, open_top=False):
    r, h, nr, nh = p["radius"], p["height"], p["neck_radius"], p["neck_height"]
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0)),
        Primitive("cylinder", (nr, nh), (0, 0, h + nh / 2, 0, 0, 0)),
        Primitive("box", (0.006, 1.1 * r, 0.6 * h), (r, 0, 0.45 * h, 0, 0, 0), (240, 240, 240)),
        _stripe(nr, r, h, 0.4 * r, LIGHT),
    )
    out = dict(primitives=prims, mouth=(0.0, 0.0, h + nh), mouth_radius=nr)
    if open_top:
        out["primitives"] = prims + (
            Primitive("cylinder", (0.7 * nr, 0.002), (0, 0, h + nh + 0.001, 0, 0, 0), DARK),)
    return out


def _cup(p, color):
    r, h, s = p["radius"], p["height"], p["spout"]
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0)),
        Primitive("cylinder", (0.88 * r, 0.003), (0, 0, h + 0.0015, 0, 0, 0), (110, 70, 40)),
        Primitive("box", (s, 0.6 * s, 0.012), (r + 0.3 * s, 0, h - 0.006, 0, 0, 0)),
        _stripe(-0.8 * r, 0.0, h + 0.003, 0.3 * r, LIGHT),
    )
    return dict(primitives=prims, grasp_site=(0.0, 0.0, h - 0.015), mouth=(0.0, 0.0, h))


def _toaster(p, color):
    L, W, H, sl = p["length"], p["width"], p["height"], p["slot_length"]
    slot_w = 0.030
    prims = (
        Primitive("box", (L, W, H), (0, 0, H / 2, 0, 0, 0)),
        Primitive("box", (sl, slot_w, 0.002), (0, 0.035, H + 0.001, 0, 0, 0), DARK),
        Primitive("box", (sl, slot_w, 0.002), (0, -0.035, H + 0.001, 0, 0, 0), DARK),
        Primitive("box", (0.02, 0.03, 0.05), (L / 2 + 0.01, 0.03, 0.7 * H, 0, 0, 0), DARK),
    )
    return dict(primitives=prims, slot=(0.0, 0.035, sl / 2, slot_w / 2))


def _banana(p, color):
    R, t, arc = p["bend_radius"], p["thickness"], p["arc"]
    prims = (
        Primitive("torus_segment", (R, t, arc), (-R, 0, t, 0, 0, 0)),
        Primitive("cylinder", (0.5 * t, 0.02),
                  (-R + R * math.cos(arc / 2), R * math.sin(arc / 2), t, math.pi / 2, 0, 0), (90, 70, 30)),
    )
    return dict(primitives=prims, grasp_site=(0.0, 0.0, t))


def _teapot(p, color):
    r, hr, sp = p["radius"], p["handle_radius"], p["spout_length"]
    prims = (
        Primitive("sphere", (r,), (0, 0, r, 0, 0, 0)),
        Primitive("cylinder", (0.35 * r, 0.015), (0, 0, 2 * r, 0, 0, 0), DARK),
        Primitive("torus_segment", (hr, 0.007, 3.4), (0.9 * r, 0, r, math.pi / 2, 0, 0)),
        Primitive("cylinder", (0.010, sp), (-r - 0.3 * sp, 0, 1.2 * r, 0, -0.9, 0)),
    )
    return dict(primitives=prims, grasp_site=(0.9 * r + hr, 0.0, r))


def _jar(p, color):
    r, h = p["radius"], p["height"]
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0)),
        Primitive("box", (0.006, 1.1 * r, 0.6 * h), (r, 0, 0.45 * h, 0, 0, 0), (240, 240, 240)),
    )
    return dict(primitives=prims, mouth=(0.0, 0.0, h), mouth_radius=r)


_BUILDERS = {
    "can": _can, "mug": _mug, "bottle": _bottle,
    "bottle_open": lambda p, c: _bottle(p, c, open_top=True),
    "cup": _cup, "toaster": _toaster, "banana": _banana, "teapot": _teapot, "jar": _jar,
}


def build_object(class_id: str, name: str | None = None, params: dict | None = None,
                 color=None, task: str | None = None) -> ObjectSpec:
    if class_id not in _BUILDERS:
        raise LibraryError("unknown object class %r" % class_id)
    p = dict(CLASS_DEFAULTS[class_id])
    if params:
        unknown = set(params) - set(p)
        if unknown:
            raise LibraryError("unknown parameters for %s: %s" % (class_id, sorted(unknown)))
        p.update(params)
    color = tuple(color) if color is not None else CLASS_COLOR[class_id]
    built = _BUILDERS[class_id](p, color)
    prims = tuple(pr if pr.color is not None else replace(pr, color=color) for pr in built.pop("primitives"))
    return ObjectSpec(name=name or class_id, class_id=class_id, task=task or CLASS_TASK[class_id],
                      primitives=prims, color=color, params=tuple(sorted(p.items())), **built)


def perturb(spec: ObjectSpec, rng: np.random.Generator, name: str, scale: float = 0.15,
            color_jitter: int = 15) -> ObjectSpec:
    """Unseen intra-class instance: every size parameter scaled by U(1-scale, 1+scale)."""
    params = {k: v * float(rng.uniform(1 - scale, 1 + scale)) for k, v in spec.params}
    color = tuple(int(np.clip(c + rng.integers(-color_jitter, color_jitter + 1), 0, 255)) for c in spec.color)
    return build_object(spec.class_id, name, params, color, spec.task)


# -- fixtures ------------------------------------------------------------------

def make_cap(mouth_radius: float, name: str = "cap") -> ObjectSpec:
    r = mouth_radius + 0.003
    h = 0.022
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0), CAP_COLOR),
        _stripe(0.0, 0.95 * r, h, 0.35 * r, DARK),
    )
    return ObjectSpec(name=name, class_id="cap", task="grasp", primitives=prims, color=CAP_COLOR,
                      role="cap", grasp_site=(0.0, 0.0, h - 0.008))


def make_container(name: str = "bowl") -> ObjectSpec:
    r, h = 0.065, 0.05
    prims = (
        Primitive("cylinder", (r, h), (0, 0, h / 2, 0, 0, 0), (150, 90, 50)),
        Primitive("cylinder", (0.85 * r, 0.002), (0, 0, h + 0.001, 0, 0, 0), (70, 45, 25)),
    )
    return ObjectSpec(name=name, class_id="bowl", task="pour", primitives=prims, color=(150, 90, 50),
                      role="container", footprint_radius=r - 0.01)


def make_bread(slot_half_length: float, name: str = "bread") -> ObjectSpec:
    length = 2 * slot_half_length - 0.02
    prims = (Primitive("box", (length, 0.018, 0.09), (0, 0, 0.045, 0, 0, 0), (210, 170, 110)),)
    return ObjectSpec(name=name, class_id="bread", task="insert_bread", primitives=prims,
                      color=(210, 170, 110), role="bread", grasp_site=(0.0, 0.0, 0.08))


# container center relative to the cup, in the cup frame
POUR_TARGET_OFFSET = (0.17, 0.0)


# -- library ---------------------------------------------------------------------

TRAIN_CLASSES = ("can", "mug", "bottle", "cup", "bottle_open", "toaster")
INTER_CLASSES = ("banana", "teapot", "jar")


@dataclass
class ObjectLibrary:
    train: list
    intra: list
    inter: list

    def split(self, name: str) -> list:
        if name not in ("train", "intra", "inter"):
            raise KeyError(name)
        return getattr(self, name)

    def all(self) -> list:
        return [(s, o) for s in ("train", "intra", "inter") for o in self.split(s)]

    def to_json(self) -> dict:
        return {"version": 1, "splits": {s: [o.to_json() for o in self.split(s)]
                                         for s in ("train", "intra", "inter")}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def from_json(cls, d: dict) -> ObjectLibrary:
        try:
            splits = d["splits"]
            return cls(*[[ObjectSpec.from_json(o) for o in splits.get(s, [])]
                         for s in ("train", "intra", "inter")])
        except (KeyError, TypeError) as e:
            raise LibraryError("malformed object library: %s" % e) from e

    @classmethod
    def load(cls, path) -> ObjectLibrary:
        return cls.from_json(json.loads(Path(path).read_text()))


def default_library(seed: int = 7, classes=TRAIN_CLASSES, inter=INTER_CLASSES) -> ObjectLibrary:
    rng = np.random.default_rng(seed)
    train = [build_object(c, name="%s_train" % c) for c in classes]
    intra = [perturb(o, rng, name="%s_intra" % o.class_id) for o in train]
    inter_objs = [build_object(c, name="%s_inter" % c) for c in inter]
    return ObjectLibrary(train, intra, inter_objs)
