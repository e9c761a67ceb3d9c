"""End-to-end acceptance criteria.

Every test records a one-line verdict (printed in the terminal summary) before
asserting, so failing criteria still report their measured values. Run just
these with ``pytest -m acceptance -s``.
"""

import json
import math
import time

import numpy as np
import pytest

from rar import act, align, cli, features
from rar.align import OracleAligner, ServoConfig, TrainConfig, geometric_bound
from rar.bench import (
    RateSummary,
    collect_demos,
    ordering_violations,
    replay_vs_policy,
    retrieval_accuracy,
    run_experiment,
)
from rar.buffer import MemoryBuffer
from rar.config import RunConfig
from rar.geometry import PlanarPose4, apply_displacement, compose, displacement_to_bottleneck, inverse
from rar.scene import default_library, sample_test_pose, setup_world, with_ee
from rar.teach import CollectionConfig, bottleneck_world, canonical_script, collect_demo, sample_pose

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
BASELINE_TRIALS = 2


@pytest.fixture
def verdict(request):
    def record(n, ok, detail):
        line = "criterion %d: %s  %s" % (n, "PASS" if ok else "FAIL", detail)
        request.node.user_properties.append(("criterion", line))
        print(line)
        return ok
    return record


def _rate(episodes, method, split="all", max_trial=None):
    sel = [e for e in episodes if e.method == method and (split == "all" or e.split == split)
           and (max_trial is None or e.trial < max_trial)]
    return sum(e.success for e in sel) / len(sel)


# -- exact property suites ---------------------------------------------------------

def test_c1_replay_equivariance(library, small_buffer, verdict):
    # no per-motion clamp: the oracle lands exactly on the bottleneck in one move
    exact = ServoConfig(max_translation=None)
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = ok = 0
    worst = 0.0
    for k, spec in enumerate(library.train):
        demo = small_buffer.demos[k]
        w0 = setup_world(spec, PlanarPose4(0.0, 0.0, 0.0, 0.0))
        ref = act.run_with_demo(w0, demo, OracleAligner(bottleneck_world(w0, canonical_script(spec))), exact)
        assert ref.success
        ref_pose = ref.replay_final_pose
        for _ in range(100):
            w = setup_world(spec, sample_test_pose(spec, rng))
            r = act.run_with_demo(w, demo, OracleAligner(bottleneck_world(w, canonical_script(spec))), exact)
            T = compose(w.objects[0][1], inverse(w0.objects[0][1]))
            expect = compose(T.with_frames(T.frame, None), ref_pose.with_frames(ref_pose.frame, None))
            got = r.replay_final_pose
            d = displacement_to_bottleneck(got.with_frames(got.frame, expect.child), expect)
            err = max(d.translation_norm, abs(d.dtheta_z),
                      float(np.max(np.abs(np.abs(got.orientation) - np.abs(expect.orientation)))))
            worst = max(worst, err)
            n += 1
            ok += bool(r.success) and err <= 1e-6
    dt = time.perf_counter() - t0
    good = ok == n and dt < 30
    verdict(1, good, "%d/%d episodes succeed with final pose within 1e-6 (worst %.1e), %.1f s" % (ok, n, worst, dt))
    assert good


def test_c2_label_correctness(library, verdict):
    lib = library
    specs = list(lib.train) + list(lib.intra[:4])
    buf = MemoryBuffer(extractors=())
    for k, spec in enumerate(specs):
        w = setup_world(spec, PlanarPose4(0.0, 0.0, 0.0, 0.0))
        buf.add_demo(collect_demo(w, spec, canonical_script(spec), CollectionConfig(I=100, rng_seed=k)))
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for d in buf.demos:
        for s in d.samples:
            reached = apply_displacement(s.pose, s.label)
            dd = displacement_to_bottleneck(reached, d.bottleneck_pose)
            worst = max(worst, dd.translation_norm, abs(dd.dtheta_z),
                        float(np.max(np.abs(reached.position - d.bottleneck_pose.position))))
            n += 1
    dt = time.perf_counter() - t0
    good = worst <= 1e-9 and dt < 5
    verdict(2, good, "%d labels over %d objects, worst residual %.1e m/rad, %.2f s" % (n, len(specs), worst, dt))
    assert good


def test_c3_gradient_correctness(verdict):
    t0 = time.perf_counter()
    errs = [align.gradient_check(align.random_model(seed), n_coords=200, seed=seed) for seed in range(5)]
    dt = time.perf_counter() - t0
    good = max(errs) < 1e-4 and dt < 10
    verdict(3, good, "max relative error %.2e over 5 models x 200 coordinates, %.1f s" % (max(errs), dt))
    assert good


def test_c4_servo_contract(library, verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    coll = CollectionConfig()
    damped = ServoConfig(step_scale=0.5)
    one_step = within_bound = 0
    for i in range(100):
        spec = library.train[i % len(library.train)]
        w = setup_world(spec, PlanarPose4(0.0, 0.0, 0.0, 0.0))
        b = bottleneck_world(w, canonical_script(spec))
        start = with_ee(w, sample_pose(b, coll, rng))
        _, tr = align.servo(start, OracleAligner(b), None)
        one_step += tr.converged and tr.iterations == 1
        d0 = displacement_to_bottleneck(start.end_effector, b)
        _, tr2 = align.servo(start, OracleAligner(b), None, damped)
        within_bound += tr2.converged and tr2.iterations <= geometric_bound(d0.translation_norm, d0.dtheta_z, damped)
    dt = time.perf_counter() - t0
    good = one_step == 100 and within_bound == 100 and dt < 10
    verdict(4, good, "exact oracle 1-iteration %d/100, damped within bound %d/100, %.1f s"
            % (one_step, within_bound, dt))
    assert good


def test_c5_trained_aligner_servo(library, verdict):
    t0 = time.perf_counter()
    buf = MemoryBuffer(extractors=("moments",))
    worlds = []
    for k, spec in enumerate(library.train[:5]):
        w = setup_world(spec, PlanarPose4(0.0, 0.0, 0.0, 0.0))
        script = canonical_script(spec)
        buf.add_demo(collect_demo(w, spec, script, CollectionConfig(I=100, rng_seed=k)))
        worlds.append((w, script))
    model = align.train(buf, TrainConfig(), "moments")
    cfg = ServoConfig()
    rng = np.random.default_rng(12345)
    coll = CollectionConfig()
    flagged = within = 0
    errs = []
    for k, (w, script) in enumerate(worlds):
        b = bottleneck_world(w, script)
        for _ in range(20):
            end, tr = align.servo(with_ee(w, sample_pose(b, coll, rng)), model, buf.demos[k].bottleneck_obs, cfg)
            d = displacement_to_bottleneck(end.end_effector, b)
            errs.append((d.translation_norm, abs(d.dtheta_z)))
            flagged += tr.converged
            within += tr.converged and d.translation_norm < cfg.gamma and abs(d.dtheta_z) < math.radians(1.0)
    dt = time.perf_counter() - t0
    med = np.median(np.array(errs), axis=0)
    # convergence is the servo's own stop rule (predicted displacement inside gamma and 1 degree);
    # the true final error is reported alongside
    good = flagged >= 90 and dt < 600
    verdict(5, good, "servo converged %d/100 (true pose within 5 mm and 1 deg: %d/100, median error %.1f mm %.1f deg),"
            " %.0f s" % (flagged, within, 1e3 * med[0], math.degrees(med[1]), dt))
    assert good


def test_c6_retrieval_exactness(small_buffer, verdict):
    t0 = time.perf_counter()
    n = ok = 0
    for ext in ("patch", "colorhist", "moments", "randproj"):
        if ext not in small_buffer.embeddings:
            small_buffer.compute_embeddings(ext)
        x = features.get_extractor(ext)
        keys = small_buffer.keys()
        # reference: embeddings recomputed from the stored pixels, scanned one pair at a time
        stored = [features.extract(x, o) for d in small_buffer.demos for o in d.observations()]
        for d in small_buffer.demos:
            for o in d.observations():
                r = small_buffer.query(o, ext)
                e = features.extract(x, o)
                sims = [features.similarity(e, s) for s in stored]
                j = max(range(len(sims)), key=lambda i: (sims[i], -i))
                hit = small_buffer.demo(r.demo_id).observations()[r.matched_key[1] + 1]
                n += 1
                ok += (abs(r.score - 1.0) <= 1e-12 and hit.same_pixels(o)
                       and keys[j] == r.matched_key and abs(sims[j] - r.score) <= 1e-12)
    dt = time.perf_counter() - t0
    good = ok == n and dt < 5
    verdict(6, good, "%d/%d self-queries return score 1.0 and agree with the exhaustive scan, %.1f s" % (ok, n, dt))
    assert good


# -- seed sweeps --------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep():
    """Per seed: one demo per train object, ours at 10 trials, baselines at fewer trials.

    Seed 0's demos also feed the replay comparison and the retrieval report so
    only one seed's buffer is ever held in memory.
    """
    lib = default_library()
    out = {"ours": [], "base": [], "times": [], "replay": None, "retrieval": None}
    for s in SEEDS:
        t0 = time.perf_counter()
        cfg = RunConfig(seed=s, methods=["ours"], trials=10)
        demos = collect_demos(lib.train, cfg, s)
        out["ours"].append(run_experiment(cfg, lib, demos))
        out["times"].append(time.perf_counter() - t0)
        base = cfg.replace(methods=["bc_guapo", "vinn", "bc"], trials=BASELINE_TRIALS)
        out["base"].append(run_experiment(base, lib, demos))
        if s == SEEDS[0]:
            t1 = time.perf_counter()
            out["replay"] = (replay_vs_policy(cfg, lib, demos), time.perf_counter() - t1)
            t1 = time.perf_counter()
            acc = retrieval_accuracy(demos.buffer, lib.intra, ["patch", "randproj", "colorhist", "moments"], cfg)
            out["retrieval"] = (acc, time.perf_counter() - t1)
        del demos
    return out


def test_c7_generalisation_shape(sweep, verdict):
    reps = sweep["ours"]
    rates = {sp: RateSummary.of([r.rate("ours", sp) for r in reps]) for sp in ("train", "intra", "inter")}
    # the gap is judged on the seed-averaged rates, like the ordering; per-seed counts are reported
    per_seed_ok = [r.rate("ours", "train") - r.rate("ours", "intra") <= 0.15 for r in reps]
    gap = rates["train"].mean - rates["intra"].mean
    ordered = rates["train"].mean >= rates["intra"].mean >= rates["inter"].mean
    slowest = max(sweep["times"])
    good = ordered and gap <= 0.15 and len(reps) >= 5 and slowest < 1200
    verdict(7, good, "train %.2f / intra %.2f / inter %.2f over %d seeds (reference 0.80 / 0.73 / 0.67); "
            "train-intra gap %.0f pp (per seed within 15 pp on %d/%d); slowest seed %.0f s"
            % (rates["train"].mean, rates["intra"].mean, rates["inter"].mean, len(reps), 100 * gap,
               sum(per_seed_ok), len(reps), slowest))
    assert good


def test_c8_method_ordering(sweep, verdict):
    # ours is read from the same seeds and test poses, restricted to the baseline trial count
    one = {"ours": RateSummary.of([_rate(r.episodes, "ours", max_trial=BASELINE_TRIALS) for r in sweep["ours"]])}
    for m in ("bc_guapo", "vinn", "bc"):
        one[m] = RateSummary.of([r.rate(m) for r in sweep["base"]])
    bad1 = ordering_violations(one, ["ours", "bc_guapo", "vinn", "bc"])

    lib = default_library()
    ten = {"vinn": [], "bc": []}
    for s in SEEDS:
        # the behaviour-cloning baselines never use alignment samples
        cfg = RunConfig(seed=s, methods=["vinn", "bc"], trials=BASELINE_TRIALS, demos_per_object=10, I=1)
        rep = run_experiment(cfg, lib, collect_demos(lib.train, cfg, s))
        for m in ten:
            ten[m].append(rep.rate(m))
    ten = {m: RateSummary.of(v) for m, v in ten.items()}
    bad10 = ordering_violations(ten, ["vinn", "bc"])
    good = not bad1 and not bad10
    fmt = lambda d: ", ".join("%s %.2f+-%.2f" % (m, v.mean, v.se) for m, v in d.items())
    verdict(8, good, "1 demo: %s; 10 demos: %s; clear violations %s" % (fmt(one), fmt(ten), bad1 + bad10 or "none"))
    assert good


def test_c9_replay_vs_policy(sweep, verdict):
    rows, dt = sweep["replay"]
    wins = sum(r.replay_successes >= r.policy_successes for r in rows)
    replay = np.array([r.replay_successes / r.trials for r in rows])
    policy = np.array([r.policy_successes / r.trials for r in rows])
    good = wins >= 4 and len(rows) == 6 and dt < 1200
    verdict(9, good, "replay >= cloned interaction on %d/6 tasks; replay %.2f+-%.2f vs policy %.2f+-%.2f "
            "(reference 0.73+-0.12 vs 0.23+-0.16), %.0f s"
            % (wins, replay.mean(), replay.std(), policy.mean(), policy.std(), dt))
    assert good


def test_c10_retrieval_accuracy(sweep, verdict):
    acc, dt = sweep["retrieval"]
    exact = all(a.matches_brute_force for a in acc.values())
    good = len(acc) >= 3 and exact and acc["patch"].accuracy >= acc["randproj"].accuracy and dt < 300
    verdict(10, good, "intra-class accuracy %s; exhaustive-scan agreement %s, %.0f s"
            % (", ".join("%s %.2f" % (k, a.accuracy) for k, a in acc.items()), exact, dt))
    assert good


# -- persistence and determinism ------------------------------------------------------

def _manifests(parent, prefix):
    runs = sorted(p for p in parent.iterdir() if p.name.startswith(prefix))
    return [json.loads((p / "manifest.json").read_text())["artifacts"] for p in runs], runs


def test_c11_persistence_and_determinism(small_buffer, tmp_path, capsys, verdict):
    t0 = time.perf_counter()
    checks = {}
    p = tmp_path / "b.rarbuf"
    small_buffer.save(p)
    back = MemoryBuffer.load(p)
    checks["buffer"] = back.to_bytes() == small_buffer.to_bytes() and all(
        np.array_equal(back.embeddings[k][1], small_buffer.embeddings[k][1]) for k in small_buffer.embeddings)

    model = align.train(small_buffer, TrainConfig(epochs=3), "moments")
    model.save(tmp_path / "m.rarmlp")
    loaded = align.AlignerModel.load(tmp_path / "m.rarmlp")
    loaded.save(tmp_path / "m2.rarmlp")
    o, g = small_buffer.demos[0].samples[0].observation, small_buffer.demos[0].bottleneck_obs
    checks["checkpoint"] = ((tmp_path / "m.rarmlp").read_bytes() == (tmp_path / "m2.rarmlp").read_bytes()
                            and np.array_equal(align.predict(model, o, g).as_array(),
                                               align.predict(loaded, o, g).as_array()))

    names = ["can_train", "mug_train"]
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"objects": names, "splits": ["train"], "I": 10, "trials": 1,
                                "methods": ["ours", "bc"], "train": {"epochs": 5}, "max_steps": 60}))
    out = tmp_path / "runs"
    for _ in range(2):
        assert cli.main(["collect", "--config", str(conf), "--out", str(out)]) == 0
    arts, runs = _manifests(out, "collect-")
    checks["collect"] = arts[0] == arts[1]
    buf = str(runs[0] / cli.BUFFER_FILE)
    for _ in range(2):
        assert cli.main(["train", "--config", str(conf), "--buffer", buf, "--out", str(out)]) == 0
    arts, runs = _manifests(out, "train-")
    checks["train"] = arts[0] == arts[1]
    for _ in range(2):
        assert cli.main(["eval", "--config", str(conf), "--buffer", buf, "--model", str(runs[0] / cli.MODEL_FILE),
                         "--out", str(out)]) in (0, 1)
    arts, runs = _manifests(out, "eval-")
    checks["eval"] = arts[0] == arts[1]
    for _ in range(2):
        assert cli.main(["plot", "--report", str(runs[0] / "report.json"), "--out", str(out)]) == 0
    checks["plot"] = (lambda a: a[0] == a[1])(_manifests(out, "plot-")[0])
    capsys.readouterr()
    printed = []
    for _ in range(2):
        cli.main(["retrieve", "--buffer", buf, "--key", "1:3"])
        cli.main(["inspect", "--buffer", buf])
        printed.append(capsys.readouterr().out.replace(str(buf), ""))
    checks["retrieve+inspect"] = printed[0] == printed[1]
    dt = time.perf_counter() - t0
    good = all(checks.values()) and dt < 120
    verdict(11, good, "%s, %.0f s" % (", ".join("%s %s" % (k, "ok" if v else "DIFFERS") for k, v in checks.items()), dt))
    assert good
