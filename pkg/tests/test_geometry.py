import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rar.geometry import (
    DegeneracyError,
    Displacement4,
    Frame,
    FrameError,
    PlanarPose4,
    Pose,
    Twist,
    apply_displacement,
    compose,
    displacement_to_bottleneck,
    integrate_twist,
    inverse,
    quat_from_axis_angle,
    quat_normalize,
    se3_exp,
    se3_log,
    wrap_angle,
)

coord = st.floats(-1.0, 1.0, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)


@st.composite
def poses(draw, frame=Frame.WORLD, child=None):
    xyz = [draw(coord) for _ in range(3)]
    axis = np.array([draw(st.floats(-1, 1)) for _ in range(3)])
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([0.0, 0.0, 1.0])
    return Pose(np.array(xyz), quat_from_axis_angle(axis, draw(angle)), frame, child)


@st.composite
def planar(draw):
    return PlanarPose4(draw(coord), draw(coord), draw(st.floats(0, 1)), draw(angle))


def test_quarter_circle_arc():
    # forward at 0.1 m/s while yawing at 1 rad/s for pi/2 s sweeps a quarter circle of radius 0.1
    step = se3_exp([0.1, 0.0, 0.0], [0.0, 0.0, 1.0], math.pi / 2)
    assert np.allclose(step.position, [0.1, 0.1, 0.0], atol=1e-12)
    assert math.isclose(step.yaw, math.pi / 2, abs_tol=1e-12)


def test_pure_translation_is_linear():
    step = se3_exp([0.2, -0.1, 0.05], [0, 0, 0], 0.5)
    assert np.allclose(step.position, [0.1, -0.05, 0.025], atol=1e-15)
    assert np.allclose(step.orientation, [1, 0, 0, 0])


def test_small_angle_branch_is_continuous():
    a = se3_exp([0.3, 0.1, 0.0], [0.0, 0.0, 1e-9], 1.0)
    b = se3_exp([0.3, 0.1, 0.0], [0.0, 0.0, 2e-8], 1.0)
    assert np.allclose(a.position, b.position, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(poses(), poses(), poses())
def test_compose_associative(a, b, c):
    left = compose(compose(a, b.with_frames(Frame.WORLD, None)), c.with_frames(Frame.WORLD, None))
    right = compose(a, compose(b.with_frames(Frame.WORLD, None), c.with_frames(Frame.WORLD, None)))
    assert left.allclose(right, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(poses())
def test_inverse_roundtrip(p):
    ident = compose(p, inverse(p))
    assert np.allclose(ident.position, 0, atol=1e-12)
    assert np.allclose(abs(ident.orientation[0]), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3), min_size=3, max_size=3),
       st.lists(st.floats(-0.8, 0.8), min_size=3, max_size=3),
       st.floats(0.01, 1.0))
def test_exp_log_roundtrip(v, w, dt):
    step = se3_exp(v, w, dt)
    lin, ang = se3_log(step)
    assert np.allclose(lin, np.array(v) * dt, atol=1e-9)
    assert np.allclose(ang, np.array(w) * dt, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(poses(child=Frame.END_EFFECTOR), poses(), st.lists(st.floats(-0.3, 0.3), min_size=6, max_size=6))
def test_twist_equivariance(p, T, vec):
    # the core replay property: the same body twist moves T∘p exactly as T∘(p moved)
    tw = Twist(tuple(vec[:3]), tuple(vec[3:]))
    moved = integrate_twist(compose(T.with_frames(Frame.WORLD, None), p), tw, 0.1)
    expect = compose(T.with_frames(Frame.WORLD, None), integrate_twist(p, tw, 0.1))
    assert moved.allclose(expect, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(planar(), planar())
def test_displacement_reaches_bottleneck(p, b):
    P = p.to_pose(Frame.WORLD, Frame.END_EFFECTOR)
    B = b.to_pose(Frame.WORLD, Frame.END_EFFECTOR)
    reached = apply_displacement(P, displacement_to_bottleneck(P, B))
    assert reached.allclose(B, atol=1e-9)


def test_displacement_is_expressed_in_end_effector_frame():
    p = PlanarPose4(0.0, 0.0, 0.0, math.pi / 2).to_pose()
    b = PlanarPose4(0.0, 0.1, 0.0, math.pi / 2).to_pose()
    d = displacement_to_bottleneck(p, b)
    # world +y is end-effector +x after a quarter turn
    assert np.allclose(d.as_array(), [0.1, 0.0, 0.0, 0.0], atol=1e-15)


def test_displacement_needs_world_frame():
    p = Pose(np.zeros(3), frame=Frame.OBJECT)
    with pytest.raises(FrameError):
        displacement_to_bottleneck(p, Pose(np.zeros(3)))


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_wrap_angle_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_twist_speed_limits():
    with pytest.raises(ValueError):
        Twist((1.0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        Twist((0, 0, 0), (0, 0, 2.0))
    clipped = Twist.from_vector([3.0, 4.0, 0, 0, 0, 0], clip=True)
    assert np.allclose(clipped.linear, (0.3, 0.4, 0.0))


def test_twist_must_be_end_effector_frame():
    tw = Twist((0.1, 0, 0), (0, 0, 0), frame=Frame.WORLD)
    with pytest.raises(FrameError):
        integrate_twist(Pose(np.zeros(3)), tw, 0.1)


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError):
        quat_normalize([0, 0, 0, 0])


def test_tilted_pose_has_no_planar_form():
    tilted = Pose(np.zeros(3), quat_from_axis_angle([1, 0, 0], 0.3))
    with pytest.raises(DegeneracyError):
        tilted.to_planar()


def test_planar_roundtrip():
    pp = PlanarPose4(0.1, -0.2, 0.3, 2.5)
    back = pp.to_pose().to_planar()
    assert np.allclose(back.as_array(), pp.as_array(), atol=1e-12)


def test_displacement_scaling_wraps_angle():
    d = Displacement4(0.1, 0.2, 0.3, 3.0).scaled(2.0)
    assert -math.pi < d.dtheta_z <= math.pi
