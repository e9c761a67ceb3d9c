import os

import pytest

from rar.buffer import MemoryBuffer
from rar.geometry import PlanarPose4
from rar.scene import default_library, setup_world
from rar.teach import CollectionConfig, canonical_script, collect_demo

os.environ.setdefault("RAR_NO_PARALLEL", "1")


@pytest.fixture(scope="session")
def library():
    return default_library()


@pytest.fixture(scope="session")
def small_buffer(library):
    """One demo per train object, 12 alignment samples each."""
    buf = MemoryBuffer(extractors=("patch", "moments", "colorhist"))
    for k, spec in enumerate(library.train):
        w = setup_world(spec, PlanarPose4(0.0, 0.0, 0.0, 0.0))
        buf.add_demo(collect_demo(w, spec, canonical_script(spec), CollectionConfig(I=12, rng_seed=k)))
    return buf


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
