"""Run configuration: a JSON document validated against a fixed schema."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

import jsonschema

from .align import ServoConfig, TrainConfig
from .teach import CollectionConfig

METHODS = ("ours", "bc", "vinn", "bc_guapo")
SPLITS = ("train", "intra", "inter")
OPERATIONAL_KEYS = ("workers", "output_dir")


class ConfigError(ValueError):
    pass


def _range():
    return {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "library": {"type": ["string", "null"]},
    "library_seed": {"type": "integer"},
    "splits": {"type": "array", "items": {"enum": list(SPLITS)}, "minItems": 1, "uniqueItems": True},
    "objects": {"type": ["array", "null"], "items": {"type": "string"}},
    "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1, "uniqueItems": True},
    "demos_per_object": {"enum": [1, 10]},
    "I": {"type": "integer", "minimum": 1},
    "dt": {"type": "number", "exclusiveMinimum": 0},
    "trials": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer"},
    "max_steps": {"type": "integer", "minimum": 1},
    "workers": {"type": ["integer", "null"], "minimum": 1},
    "output_dir": {"type": ["string", "null"]},
    "retrieval_extractor": {"type": "string"},
    "aligner_extractor": {"type": "string"},
    "policy_extractor": {"type": "string"},
    "collection": _obj({
        "x_range": _range(), "y_range": _range(), "z_range": _range(), "yaw_range_deg": _range(),
    }),
    "placement": _obj({
        "xy": {"type": "number", "minimum": 0}, "yaw_deg": {"type": "number", "minimum": 0},
    }),
    "train": _obj({
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "validation_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
        "angle_weight": {"type": "number", "exclusiveMinimum": 0},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    }),
    "servo": _obj({
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "gamma_theta_deg": {"type": "number", "exclusiveMinimum": 0},
        "max_iters": {"type": "integer", "minimum": 1},
        "step_scale": {"type": "number", "exclusiveMinimum": 0},
    }),
    "vinn": _obj({
        "k": {"type": "integer", "minimum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "extractor": {"type": "string"},
    }),
})

DEFAULTS = {
    "library": None,
    "library_seed": 7,
    "splits": list(SPLITS),
    "objects": None,
    "methods": ["ours"],
    "demos_per_object": 1,
    "I": 1000,
    "dt": 0.05,
    "trials": 10,
    "seed": 0,
    "max_steps": 400,
    "workers": None,
    "output_dir": None,
    "retrieval_extractor": "colorhist",
    "aligner_extractor": "moments",
    "policy_extractor": "moments",
    "collection": {"x_range": [-0.15, 0.15], "y_range": [-0.15, 0.15], "z_range": [0.0, 0.3],
                   "yaw_range_deg": [-45.0, 45.0]},
    "placement": {"xy": 0.08, "yaw_deg": 45.0},
    "train": {"learning_rate": 1e-3, "batch_size": 64, "epochs": 200, "validation_fraction": 0.1,
              "angle_weight": 0.25, "hidden": [256, 256]},
    "servo": {"gamma": 5e-3, "gamma_theta_deg": 1.0, "max_iters": 50, "step_scale": 1.0},
    "vinn": {"k": 5, "temperature": 0.1, "extractor": "patch"},
}


def _path(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(doc: dict) -> None:
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join("%s: %s" % (_path(e), e.message) for e in errors))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Validated configuration with defaults filled in."""

    def __init__(self, doc: dict | None = None, **overrides):
        doc = dict(doc or {})
        validate(doc)
        full = _merge(DEFAULTS, doc)
        full = _merge(full, overrides)
        validate(full)
        self.doc = full
        # build once so semantic errors surface at load time
        self.collection(0)
        self.train_config()
        self.servo_config()

    def __getitem__(self, key):
        return self.doc[key]

    def replace(self, **overrides) -> RunConfig:
        return RunConfig(self.doc, **overrides)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as e:
            raise ConfigError("%s: invalid JSON (%s)" % (path, e)) from e
        if not isinstance(doc, dict):
            raise ConfigError("<root>: config must be a JSON object")
        return cls(doc)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=1)

    def result_doc(self) -> dict:
        """The document without fields that cannot change results (worker count, output location)."""
        return {k: copy.deepcopy(v) for k, v in self.doc.items() if k not in OPERATIONAL_KEYS}

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.result_doc(), sort_keys=True).encode()).hexdigest()

    def collection(self, rng_seed: int) -> CollectionConfig:
        c = self.doc["collection"]
        try:
            return CollectionConfig(I=self.doc["I"], x_range=tuple(c["x_range"]), y_range=tuple(c["y_range"]),
                                    z_range=tuple(c["z_range"]),
                                    yaw_range=tuple(math.radians(a) for a in c["yaw_range_deg"]),
                                    dt=self.doc["dt"], rng_seed=rng_seed)
        except ValueError as e:
            raise ConfigError("collection: %s" % e) from e

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(t["learning_rate"], t["batch_size"], t["epochs"], t["validation_fraction"],
                           t["angle_weight"], self.doc["seed"] if seed is None else seed, tuple(t["hidden"]))

    def servo_config(self) -> ServoConfig:
        s = self.doc["servo"]
        diag = self.collection(0).diagonal
        return ServoConfig(s["gamma"], math.radians(s["gamma_theta_deg"]), s["max_iters"], s["step_scale"], diag)
