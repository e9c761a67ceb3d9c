"""Command-line entry point.

Every command writes into a fresh run directory under ``--out`` holding a
config snapshot and a manifest of artifact hashes. Exit codes: 0 success,
1 episode failures present, 2 operational error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import align, features, mlp
from .buffer import BufferError, MemoryBuffer
from .config import ConfigError, RunConfig
from .scene.objects import LibraryError
from .scene.world import Observation

EXIT_OK, EXIT_FAILURES, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2, 3

BUFFER_FILE = "buffer.rarbuf"
MODEL_FILE = "aligner.rarmlp"


class CLIError(Exception):
    pass


# -- run directories ---------------------------------------------------------------

def _strip_wall_time(x):
    if isinstance(x, dict):
        return {k: _strip_wall_time(v) for k, v in x.items() if k != "wall_time"}
    if isinstance(x, list):
        return [_strip_wall_time(v) for v in x]
    return x


def artifact_hash(path) -> str:
    """sha256 of a file; JSON and JSON-lines content is hashed with wall_time fields removed."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".json":
        data = json.dumps(_strip_wall_time(json.loads(data)), sort_keys=True).encode()
    elif path.suffix == ".jsonl":
        rows = [json.loads(line) for line in data.decode().splitlines() if line.strip()]
        data = "\n".join(json.dumps(_strip_wall_time(r), sort_keys=True) for r in rows).encode()
    return hashlib.sha256(data).hexdigest()


def fresh_run_dir(out: Path, command: str, cfg: RunConfig) -> Path:
    """``<out>/<command>-<config hash prefix>``, suffixed until unused."""
    out.mkdir(parents=True, exist_ok=True)
    stem = "%s-%s" % (command, cfg.content_hash()[:12])
    d, n = out / stem, 1
    while d.exists():
        n += 1
        d = out / ("%s-%d" % (stem, n))
    d.mkdir()
    (d / "config.json").write_text(json.dumps(cfg.result_doc(), sort_keys=True, indent=1) + "\n")
    return d


def write_manifest(run_dir: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    arts = {p.name: artifact_hash(p) for p in sorted(run_dir.iterdir())
            if p.is_file() and p.name != "manifest.json"}
    m = {"command": command, "config_hash": cfg.content_hash(), "seed": cfg["seed"], "artifacts": arts}
    m.update(extra or {})
    (run_dir / "manifest.json").write_text(json.dumps(m, sort_keys=True, indent=1) + "\n")
    return m


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if getattr(args, "demos", None) is not None:
        over["demos_per_object"] = args.demos
    if getattr(args, "out", None) is not None:
        over["output_dir"] = str(args.out)
    return cfg.replace(**over) if over else cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(cfg["output_dir"] or "runs")


def _require(path, what: str) -> Path:
    if path is None:
        raise CLIError("--%s is required" % what)
    p = Path(path)
    if not p.is_file():
        raise CLIError("%s not found: %s" % (what, p))
    return p


# -- commands --------------------------------------------------------------------

def cmd_collect(args) -> int:
    from .bench import collect_demos, load_library

    cfg = load_config(args)
    lib = load_library(cfg)
    extractors = ("colorhist", "moments") + ((args.extractor,) if args.extractor else ())
    demos = collect_demos(lib.train, cfg, cfg["seed"], tuple(dict.fromkeys(extractors)))
    run = fresh_run_dir(_out_dir(args, cfg), "collect", cfg)
    demos.buffer.save(run / BUFFER_FILE)
    for d in demos.demos:
        print("%-20s task=%-12s I=%-5d trajectory=%d steps" % (d.spec.name, d.record.task,
                                                             len(d.record.samples), len(d.record.trajectory)))
    write_manifest(run, cfg, "collect", {"demos": len(demos.demos),
                                         "observations": demos.buffer.observation_count})
    print("buffer: %s (%d observations)" % (run / BUFFER_FILE, demos.buffer.observation_count))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    buf = MemoryBuffer.load(_require(args.buffer, "buffer"))
    ext = args.extractor or cfg["aligner_extractor"]
    model = align.train(buf, cfg.train_config(), ext)
    run = fresh_run_dir(_out_dir(args, cfg), "train", cfg)
    model.save(run / MODEL_FILE)
    lines = ["epoch,train_loss,val_loss"]
    lines += ["%d,%.10g,%.10g" % (i, t, v) for i, (t, v) in enumerate(zip(model.train_loss, model.val_loss))]
    (run / "loss.csv").write_text("\n".join(lines) + "\n")
    write_manifest(run, cfg, "train", {"extractor": ext})
    print("val loss %.5g -> %.5g; checkpoint %s" % (model.val_loss[0], model.val_loss[-1], run / MODEL_FILE))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    worst = []
    for k in range(args.models):
        m = align.random_model(cfg["seed"] + k, args.extractor or cfg["aligner_extractor"],
                               tuple(cfg["train"]["hidden"]))
        worst.append(align.gradient_check(m, n_coords=args.coords, seed=cfg["seed"] + k,
                                          angle_weight=cfg["train"]["angle_weight"]))
        print("model %d: max relative error %.3e" % (k, worst[-1]))
    print("max relative error %.3e over %d models x %d coordinates" % (max(worst), args.models, args.coords))
    return EXIT_OK if max(worst) < args.tolerance else EXIT_FAILURES


def cmd_eval(args) -> int:
    from .bench import DemoSet, emit_report, load_library, run_experiment

    cfg = load_config(args)
    lib = load_library(cfg)
    demos = DemoSet.from_buffer(MemoryBuffer.load(_require(args.buffer, "buffer")), cfg["dt"]) \
        if args.buffer else None
    aligner = align.AlignerModel.load(_require(args.model, "model")) if args.model else None
    report = run_experiment(cfg, lib, demos, log=lambda s: print(s, flush=True), aligner=aligner,
                            dump_obs=args.dump_obs)
    run = fresh_run_dir(_out_dir(args, cfg), "eval", cfg)
    emit_report(report, run)
    if report.traces:
        rows = []
        for i, t in report.traces:
            e = report.episodes[i]
            rows.append({"method": e.method, "split": e.split, "object": e.object, "trial": e.trial, **t})
        with open(run / "episodes.jsonl", "w") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
    write_manifest(run, cfg, "eval")
    for m, split, t, k in report.aggregates():
        print("%-9s %-6s %3d/%-3d %.2f" % (m, split, k, t, k / t))
    print("report: %s" % run)
    return EXIT_OK if all(e.success for e in report.episodes) else EXIT_FAILURES


def _load_image(path: Path) -> Observation:
    with np.load(path) as z:
        return Observation(np.asarray(z["rgb"], dtype=np.uint8), np.asarray(z["depth"], dtype=np.float32))


def cmd_retrieve(args) -> int:
    buf = MemoryBuffer.load(_require(args.buffer, "buffer"))
    ext = args.extractor or "colorhist"
    if args.image:
        o = _load_image(_require(args.image, "image"))
    elif args.key:
        d, i = (int(x) for x in args.key.split(":"))
        rec = buf.demo(d)
        o = rec.bottleneck_obs if i < 0 else rec.samples[i].observation
    else:
        raise CLIError("one of --image or --key is required")
    if ext not in buf.embeddings:
        buf.compute_embeddings(ext)
    for (d, i), score in buf.top_k(o, ext, args.k):
        print("%d:%d\t%.6f\t%s" % (d, i, score, buf.demo(d).task))
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = _require(args.buffer, "buffer")
    buf = MemoryBuffer.load(path)
    tasks = {}
    for d in buf.demos:
        tasks[d.task] = tasks.get(d.task, 0) + 1
    info = {
        "file": str(path),
        "bytes": path.stat().st_size,
        "demos": len(buf),
        "observations": buf.observation_count,
        "tasks": dict(sorted(tasks.items())),
        "trajectory_steps": [len(d.trajectory) for d in buf.demos],
        "embeddings": {k: list(m.shape) for k, (_, m) in sorted(buf.embeddings.items())},
    }
    print(json.dumps(info, indent=1))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .bench import ExperimentReport
    from .bench.report import report_svg

    path = _require(args.report, "report")
    try:
        report = ExperimentReport.from_json(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CLIError("%s: not an experiment report (%s)" % (path, e)) from e
    cfg = RunConfig(report.config)
    run = fresh_run_dir(Path(args.out or "runs"), "plot", cfg)
    (run / "report.svg").write_text(report_svg(report))
    write_manifest(run, cfg, "plot")
    print(run / "report.svg")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rar", description="retrieve, align and replay on a simulated tabletop")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        if runs:
            p.add_argument("--out", help="parent directory for the run directory (default runs/)")
        return p

    p = common(sub.add_parser("collect", help="collect one demo per train object into a buffer"))
    p.add_argument("--extractor", help="extra extractor to embed at collection time")
    p.add_argument("--demos", type=int, choices=(1, 10))
    p.set_defaults(fn=cmd_collect)

    p = common(sub.add_parser("train", help="train the alignment network on a buffer"))
    p.add_argument("--buffer", required=True)
    p.add_argument("--extractor")
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("gradcheck", help="compare backprop against finite differences"), runs=False)
    p.add_argument("--extractor")
    p.add_argument("--models", type=int, default=5)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = common(sub.add_parser("eval", help="run the configured methods and emit a report"))
    p.add_argument("--buffer", help="reuse a collected buffer instead of collecting")
    p.add_argument("--model", help="reuse a trained aligner for ours")
    p.add_argument("--workers", type=int)
    p.add_argument("--demos", type=int, choices=(1, 10))
    p.add_argument("--dump-obs", action="store_true", help="include live observations in episodes.jsonl")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("retrieve", help="top-k buffer matches for an image")
    p.add_argument("--buffer", required=True)
    p.add_argument("--image", help=".npz with rgb (128x128x3 uint8) and depth (128x128 float32)")
    p.add_argument("--key", help="stored observation 'demo:sample' (sample -1 is the bottleneck)")
    p.add_argument("--extractor")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("inspect", help="counts, tasks and sizes of a buffer")
    p.add_argument("--buffer", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("plot", help="SVG bars from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plot)
    return ap


OPERATIONAL = (CLIError, ConfigError, LibraryError, BufferError, mlp.CheckpointError, features.FeatureError,
               FileNotFoundError, IsADirectoryError, KeyError, ValueError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except mlp.DivergenceError as e:
        print("error: training diverged: %s" % e, file=sys.stderr)
        return EXIT_DIVERGED
    except OPERATIONAL as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
