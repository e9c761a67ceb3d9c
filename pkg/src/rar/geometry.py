"""Rigid-body math: poses, planar poses, twists, displacements.

Quaternions are (w, x, y, z) and every composition renormalizes them.
Poses are immutable; all operations return new values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-9
PLANAR_TOL = 1e-6
MAX_LINEAR_SPEED = 0.5
MAX_ANGULAR_SPEED = 1.5


class FrameError(ValueError):
    pass


class DegeneracyError(ValueError):
    pass


class Frame(str, enum.Enum):
    WORLD = "world"
    END_EFFECTOR = "end_effector"
    OBJECT = "object"
    CAMERA = "camera"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


# -- quaternion helpers ------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("cannot normalize quaternion %r" % (q,))
    q = q / n
    # canonical hemisphere keeps equality checks stable
    if q[0] < 0:
        q = -q
    return q


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-15 or angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    h = 0.5 * angle
    return quat_normalize(np.concatenate([[math.cos(h)], math.sin(h) * axis]))


def quat_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic Z-Y-X (yaw, then pitch, then roll)."""
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qx = quat_from_axis_angle([1, 0, 0], roll)
    return quat_normalize(quat_mul(quat_mul(qz, qy), qx))


def quat_to_rpy(q) -> tuple[float, float, float]:
    w, x, y, z = q
    roll = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    sp = max(-1.0, min(1.0, 2 * (w * y - z * x)))
    pitch = math.asin(sp)
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# -- value types -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from ``child`` coordinates into ``frame`` coordinates.

    ``child`` may be left as None for anonymous transforms; anonymous poses
    chain with anything.
    """

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    frame: Frame = Frame.WORLD
    child: Frame | None = None

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        q = quat_normalize(np.array(self.orientation, dtype=float).reshape(4))
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite position")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls, frame: Frame = Frame.WORLD, child: Frame | None = None) -> Pose:
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]), frame, child)

    @classmethod
    def from_matrix(cls, T, frame: Frame = Frame.WORLD, child: Frame | None = None) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], matrix_to_quat(T[:3, :3]), frame, child)

    @classmethod
    def from_xyz_rpy(cls, xyz, rpy=(0.0, 0.0, 0.0), frame: Frame = Frame.WORLD,
                     child: Frame | None = None) -> Pose:
        return cls(np.asarray(xyz, dtype=float), quat_from_rpy(*rpy), frame, child)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def rpy(self) -> tuple[float, float, float]:
        return quat_to_rpy(self.orientation)

    @property
    def yaw(self) -> float:
        return self.rpy()[2]

    def transform_point(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.position

    def to_planar(self) -> PlanarPose4:
        roll, pitch, yaw = self.rpy()
        if abs(roll) > PLANAR_TOL or abs(pitch) > PLANAR_TOL:
            raise DegeneracyError("pose is not planar (roll=%.3g, pitch=%.3g)" % (roll, pitch))
        x, y, z = self.position
        return PlanarPose4(float(x), float(y), float(z), yaw)

    def with_frames(self, frame: Frame, child: Frame | None) -> Pose:
        # arrays are already validated and read-only; skip re-normalization
        out = object.__new__(Pose)
        for k, v in (("position", self.position), ("orientation", self.orientation), ("frame", frame),
                     ("child", child)):
            object.__setattr__(out, k, v)
        return out

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        return (np.allclose(self.position, other.position, atol=atol, rtol=0)
                and rotation_distance(self, other) <= atol)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation)
                and self.frame == other.frame and self.child == other.child)

    def __hash__(self):
        return hash((self.position.tobytes(), self.orientation.tobytes(), self.frame, self.child))

    def __repr__(self):
        x, y, z = self.position
        r, p, yw = self.rpy()
        return "Pose(xyz=(%.4f, %.4f, %.4f), rpy=(%.4f, %.4f, %.4f), %s->%s)" % (
            x, y, z, r, p, yw, self.child and self.child.value, self.frame.value)


def rotation_distance(a: Pose, b: Pose) -> float:
    """Geodesic angle between two orientations, radians."""
    r = quat_mul(quat_conj(a.orientation), b.orientation)
    return 2.0 * math.atan2(float(np.linalg.norm(r[1:])), abs(float(r[0])))


def compose(a: Pose, b: Pose) -> Pose:
    """Return a ∘ b; ``a.child`` must match ``b.frame`` when both are known."""
    if a.child is not None and a.child != b.frame:
        raise FrameError("cannot compose %s->%s with %s->%s" % (
            a.child.value, a.frame.value, b.child.value if b.child else "?", b.frame.value))
    q = quat_mul(a.orientation, b.orientation)
    p = a.rotation @ b.position + a.position
    return Pose(p, q, a.frame, b.child)


def inverse(a: Pose) -> Pose:
    qi = quat_conj(a.orientation)
    p = -(quat_to_matrix(qi) @ a.position)
    frame = a.child if a.child is not None else a.frame
    return Pose(p, qi, frame, a.frame)


@dataclass(frozen=True)
class PlanarPose4:
    x: float
    y: float
    z: float
    theta_z: float

    def __post_init__(self):
        object.__setattr__(self, "theta_z", wrap_angle(float(self.theta_z)))

    def to_pose(self, frame: Frame = Frame.WORLD, child: Frame | None = None) -> Pose:
        return Pose(np.array([self.x, self.y, self.z]),
                    quat_from_axis_angle([0, 0, 1], self.theta_z), frame, child)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta_z])


@dataclass(frozen=True)
class Twist:
    """End-effector-frame velocity. Limits are enforced on construction."""

    linear: tuple
    angular: tuple
    frame: Frame = Frame.END_EFFECTOR
    max_linear: float = field(default=MAX_LINEAR_SPEED, repr=False, compare=False)
    max_angular: float = field(default=MAX_ANGULAR_SPEED, repr=False, compare=False)

    def __post_init__(self):
        v = tuple(float(c) for c in self.linear)
        w = tuple(float(c) for c in self.angular)
        if len(v) != 3 or len(w) != 3:
            raise ValueError("twist needs 3 linear and 3 angular components")
        if not all(math.isfinite(c) for c in v + w):
            raise ValueError("non-finite twist")
        if math.hypot(*v) > self.max_linear + 1e-12:
            raise ValueError("linear speed %.4f exceeds %.4f" % (math.hypot(*v), self.max_linear))
        if math.hypot(*w) > self.max_angular + 1e-12:
            raise ValueError("angular speed %.4f exceeds %.4f" % (math.hypot(*w), self.max_angular))
        object.__setattr__(self, "linear", v)
        object.__setattr__(self, "angular", w)

    @classmethod
    def zero(cls) -> Twist:
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_vector(cls, vec, clip: bool = False) -> Twist:
        """Build from a 6-vector; ``clip`` rescales to the speed limits instead of raising."""
        vec = np.asarray(vec, dtype=float)
        v, w = vec[:3], vec[3:6]
        if clip:
            nv, nw = np.linalg.norm(v), np.linalg.norm(w)
            if nv > MAX_LINEAR_SPEED:
                v = v * (MAX_LINEAR_SPEED / nv)
            if nw > MAX_ANGULAR_SPEED:
                w = w * (MAX_ANGULAR_SPEED / nw)
        return cls(tuple(v), tuple(w))

    def as_vector(self) -> np.ndarray:
        return np.array(self.linear + self.angular)


@dataclass(frozen=True)
class Displacement4:
    """4-DoF correction: translation in the end-effector frame plus a yaw increment."""

    dx: float
    dy: float
    dz: float
    dtheta_z: float

    def __post_init__(self):
        object.__setattr__(self, "dtheta_z", wrap_angle(float(self.dtheta_z)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def translation_norm(self) -> float:
        return math.sqrt(self.dx ** 2 + self.dy ** 2 + self.dz ** 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dtheta_z])

    @classmethod
    def from_array(cls, a) -> Displacement4:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def scaled(self, s: float) -> Displacement4:
        return Displacement4(self.dx * s, self.dy * s, self.dz * s, self.dtheta_z * s)


def displacement_to_bottleneck(p: Pose, b: Pose) -> Displacement4:
    """Displacement that carries end-effector pose ``p`` onto ``b``, both in world frame."""
    if p.frame != Frame.WORLD or b.frame != Frame.WORLD:
        raise FrameError("displacement needs world-frame poses")
    pp = p.to_planar()
    bp = b.to_planar()
    d_world = np.array([bp.x - pp.x, bp.y - pp.y, bp.z - pp.z])
    c, s = math.cos(pp.theta_z), math.sin(pp.theta_z)
    # rotate into the end-effector frame: R_z(theta)^T d
    d_ee = np.array([c * d_world[0] + s * d_world[1], -s * d_world[0] + c * d_world[1], d_world[2]])
    return Displacement4(d_ee[0], d_ee[1], d_ee[2], bp.theta_z - pp.theta_z)


def displacement_pose(d: Displacement4) -> Pose:
    return Pose(d.translation, quat_from_axis_angle([0, 0, 1], d.dtheta_z),
                Frame.END_EFFECTOR, Frame.END_EFFECTOR)


def apply_displacement(p: Pose, d: Displacement4) -> Pose:
    """Move ``p`` by ``d``: translate in its own frame, then yaw about its z axis."""
    out = compose(p.with_frames(p.frame, None), displacement_pose(d))
    return out.with_frames(p.frame, p.child)


def se3_exp(linear, angular, dt: float) -> Pose:
    """Closed-form exponential of a body twist held for ``dt`` seconds."""
    v = np.asarray(linear, dtype=float) * dt
    w = np.asarray(angular, dtype=float) * dt
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        # Taylor terms of (1-cos)/θ² and (θ-sin)/θ³
        A = 0.5 - theta ** 2 / 24.0
        B = 1.0 / 6.0 - theta ** 2 / 120.0
    else:
        A = (1.0 - math.cos(theta)) / theta ** 2
        B = (theta - math.sin(theta)) / theta ** 3
    V = np.eye(3) + A * K + B * (K @ K)
    q = quat_from_axis_angle(w, theta) if theta > 0 else np.array([1.0, 0, 0, 0])
    return Pose(V @ v, q, Frame.END_EFFECTOR, Frame.END_EFFECTOR)


def integrate_twist(p: Pose, t: Twist, dt: float) -> Pose:
    if t.frame != Frame.END_EFFECTOR:
        raise FrameError("trajectory twists must be expressed in the end-effector frame")
    if not dt > 0:
        raise ValueError("dt must be positive")
    step = se3_exp(t.linear, t.angular, dt)
    out = compose(p.with_frames(p.frame, None), step)
    return out.with_frames(p.frame, p.child)


def se3_log(T: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`se3_exp` with dt = 1: returns (linear, angular)."""
    q = T.orientation
    s = float(np.linalg.norm(q[1:]))
    theta = 2.0 * math.atan2(s, q[0])
    w = np.zeros(3) if s < 1e-15 else q[1:] / s * theta
    K = skew(w)
    if theta < 1e-8:
        C = 1.0 / 12.0
    else:
        C = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta ** 2
    V_inv = np.eye(3) - 0.5 * K + C * (K @ K)
    return V_inv @ T.position, w
