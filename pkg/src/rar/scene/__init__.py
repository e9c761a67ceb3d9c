from .objects import (
    TASKS,
    LibraryError,
    ObjectLibrary,
    ObjectSpec,
    Primitive,
    build_object,
    default_library,
    perturb,
)
from .render import Intrinsics
from .world import (
    CLOSED,
    MOUNT,
    OPEN,
    Observation,
    Table,
    TaskError,
    WorldState,
    check_success,
    ee_pose,
    render,
    sample_test_pose,
    set_gripper,
    setup_world,
    start_pose,
    step,
    with_ee,
)
