"""Baselines and the experiment harness."""

from .harness import (
    EpisodeRecord,
    ExperimentReport,
    RateSummary,
    RetrievalAccuracy,
    TaskComparison,
    load_library,
    ordering_violations,
    replay_vs_policy,
    retrieval_accuracy,
    run_experiment,
    seed_sweep,
    summarize,
    test_pose,
)
from .methods import METHOD_TYPES, DemoSet, Method, Outcome, collect_demos, make_method
from .policies import BCPolicy, VINNPolicy, vinn_action
from .report import emit_report
