"""Pinhole ray casting over analytic primitives.

Rays share the camera center, so each primitive is tested in its own frame
against one origin and a bundle of directions. Ray directions carry a unit
camera-z component, which makes the hit parameter equal to z-depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..geometry import Pose, quat_from_rpy, quat_to_matrix
from .objects import ObjectSpec, Primitive

IMAGE_SIZE = 128
FOV_DEG = 90.0
NEAR = 1e-4
AMBIENT = 0.35
LIGHT_DIR = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])


@dataclass(frozen=True)
class Intrinsics:
    size: int = IMAGE_SIZE
    fov_deg: float = FOV_DEG

    @property
    def focal(self) -> float:
        return (self.size / 2) / math.tan(math.radians(self.fov_deg) / 2)

    @property
    def center(self) -> float:
        return self.size / 2

    def project(self, p_cam) -> tuple[float, float]:
        """Camera-frame point to (column, row) pixel coordinates (pixel centers at +0.5)."""
        x, y, z = p_cam
        return self.focal * x / z + self.center, self.focal * y / z + self.center


@lru_cache(maxsize=4)
def _camera_rays(size: int, fov_deg: float) -> np.ndarray:
    intr = Intrinsics(size, fov_deg)
    c = (np.arange(size) + 0.5 - intr.center) / intr.focal
    u, v = np.meshgrid(c, c)  # u: column (x), v: row (y)
    return np.stack([u.ravel(), v.ravel(), np.ones(size * size)], axis=1)


def _local_rigid(pose6) -> tuple[np.ndarray, np.ndarray]:
    x, y, z, r, p, yw = pose6
    return quat_to_matrix(quat_from_rpy(r, p, yw)), np.array([x, y, z])


@dataclass(frozen=True)
class _Solid:
    kind: str
    size: tuple
    R: np.ndarray  # object frame <- solid frame
    p: np.ndarray
    color: np.ndarray
    radius: float


@lru_cache(maxsize=256)
def _solids(spec: ObjectSpec) -> tuple:
    """Flatten an object into renderable solids; torus segments become chains of cylinders."""
    out = []
    for prim in spec.primitives:
        R, p = _local_rigid(prim.pose)
        color = np.array(prim.color if prim.color is not None else spec.color, dtype=float)
        if prim.kind == "torus_segment":
            out.extend(_torus_pieces(prim, R, p, color))
        else:
            out.append(_Solid(prim.kind, prim.size, R, p, color, prim.bounding_radius()))
    return tuple(out)


def _torus_pieces(prim: Primitive, R, p, color):
    major, minor, arc = prim.size
    n = max(3, int(math.ceil(arc / (math.pi / 8))))
    angles = np.linspace(-arc / 2, arc / 2, n + 1)
    pts = np.stack([major * np.cos(angles), major * np.sin(angles), np.zeros(n + 1)], axis=1)
    pieces = []
    for a, b in zip(pts[:-1], pts[1:]):
        mid = 0.5 * (a + b)
        axis = (b - a) / np.linalg.norm(b - a)
        length = np.linalg.norm(b - a) + minor  # overlap hides the joints
        # rotate local z onto the chord direction
        z = np.array([0.0, 0.0, 1.0])
        v = np.cross(z, axis)
        s = np.linalg.norm(v)
        c = float(np.dot(z, axis))
        if s < 1e-12:
            Rc = np.eye(3)
        else:
            K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
            Rc = np.eye(3) + K + K @ K * ((1 - c) / s ** 2)
        pieces.append(_Solid("cylinder", (minor, length), R @ Rc, R @ mid + p, color,
                             math.hypot(minor, length / 2)))
    return pieces


# -- intersections in the solid frame --------------------------------------------
# o: (3,) origin, d: (N,3) directions. Return t (N,) with inf for misses and normals (N,3).

def _hit_cylinder(o, d, size):
    r, h = size
    hh = h / 2
    n = len(d)
    t_best = np.full(n, np.inf)
    nrm = np.zeros((n, 3))
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = 2 * (o[0] * dx + o[1] * dy)
    c = o[0] ** 2 + o[1] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-14)
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2 * a)
            z = o[2] + t * dz
            valid = ok & (t > NEAR) & (np.abs(z) <= hh) & (t < t_best)
            t_best = np.where(valid, t, t_best)
            hx, hy = o[0] + t * dx, o[1] + t * dy
            nrm[valid] = np.stack([hx[valid] / r, hy[valid] / r, np.zeros(valid.sum())], axis=1)
        for cap in (hh, -hh):
            t = (cap - o[2]) / dz
            hx, hy = o[0] + t * dx, o[1] + t * dy
            valid = (np.abs(dz) > 1e-14) & (t > NEAR) & (hx * hx + hy * hy <= r * r) & (t < t_best)
            t_best = np.where(valid, t, t_best)
            nrm[valid] = [0.0, 0.0, 1.0 if cap > 0 else -1.0]
    return t_best, nrm


def _hit_box(o, d, size):
    half = np.asarray(size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-half - o) * inv
        t1 = (half - o) * inv
    tlo = np.minimum(t0, t1)
    thi = np.maximum(t0, t1)
    # rays parallel to a slab and outside it never hit
    par = d == 0
    outside = par & (np.abs(o) > half)
    tlo = np.where(par, -np.inf, tlo)
    thi = np.where(par, np.inf, thi)
    tmin = tlo.max(axis=1)
    tmax = thi.min(axis=1)
    hit = (tmax >= np.maximum(tmin, NEAR)) & ~outside.any(axis=1)
    t = np.where(tmin > NEAR, tmin, tmax)
    t = np.where(hit, t, np.inf)
    axis = np.argmax(tlo, axis=1)
    nrm = np.zeros_like(d)
    rows = np.arange(len(d))
    nrm[rows, axis] = -np.sign(d[rows, axis])
    return t, nrm


def _hit_sphere(o, d, size):
    r = size[0]
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * d @ o
    c = o @ o - r * r
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    t = np.where(t1 > NEAR, t1, t2)
    t = np.where(ok & (t > NEAR), t, np.inf)
    hitp = o + t[:, None] * d
    with np.errstate(invalid="ignore"):
        nrm = np.where(np.isfinite(t)[:, None], hitp / r, 0.0)
    return t, nrm


_HIT = {"cylinder": _hit_cylinder, "box": _hit_box, "sphere": _hit_sphere}


def cast(origin: np.ndarray, dirs: np.ndarray, placed, table=None):
    """Ray cast a bundle against placed objects and an optional table.

    ``placed`` is a sequence of (ObjectSpec, Pose); ``table`` is
    (height, xmin, xmax, ymin, ymax). Returns (t, normals, colors, ids) where
    ids is -1 for the table and -2 for no hit.
    """
    n = len(dirs)
    t_best = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    colors = np.zeros((n, 3))
    ids = np.full(n, -2, dtype=np.int32)
    if table is not None:
        h, x0, x1, y0, y1 = table
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (h - origin[2]) / dirs[:, 2]
        hx = origin[0] + t * dirs[:, 0]
        hy = origin[1] + t * dirs[:, 1]
        valid = (t > NEAR) & (hx >= x0) & (hx <= x1) & (hy >= y0) & (hy <= y1)
        t_best[valid] = t[valid]
        normals[valid] = [0.0, 0.0, 1.0]
        colors[valid] = TABLE_COLOR
        ids[valid] = -1
    dd = np.einsum("ij,ij->i", dirs, dirs)
    for idx, (spec, pose) in enumerate(placed):
        Ro = pose.rotation
        for solid in _solids(spec):
            R = Ro @ solid.R
            p = Ro @ solid.p + pose.position
            # bounding-sphere cull, shared origin
            oc = p - origin
            proj = dirs @ oc
            dist2 = oc @ oc - proj * proj / dd
            cand = np.nonzero((dist2 <= solid.radius ** 2) & ((proj > 0) | (oc @ oc <= solid.radius ** 2)))[0]
            if cand.size == 0:
                continue
            o_l = R.T @ (origin - p)
            d_l = dirs[cand] @ R
            t, nl = _HIT[solid.kind](o_l, d_l, solid.size)
            closer = t < t_best[cand]
            if not closer.any():
                continue
            sel = cand[closer]
            t_best[sel] = t[closer]
            normals[sel] = nl[closer] @ R.T
            colors[sel] = solid.color
            ids[sel] = idx
    return t_best, normals, colors, ids


TABLE_COLOR = np.array([150.0, 130.0, 105.0])


def shade(normals: np.ndarray, colors: np.ndarray, hit: np.ndarray) -> np.ndarray:
    lambert = np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
    lum = AMBIENT + (1 - AMBIENT) * lambert
    rgb = colors * lum[:, None]
    rgb[~hit] = 0.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_view(camera: Pose, placed, table, intr: Intrinsics = Intrinsics(),
                noise_sigma: float = 0.0, rng=None):
    """Render RGB (H,W,3 uint8), depth (H,W float32 meters, 0 = no hit) and per-pixel ids."""
    rays = _camera_rays(intr.size, intr.fov_deg)
    dirs = rays @ camera.rotation.T
    t, normals, colors, ids = cast(camera.position, dirs, placed, table)
    hit = np.isfinite(t)
    rgb = shade(normals, colors, hit)
    depth = np.where(hit, t, 0.0).astype(np.float32)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("pixel noise needs an explicit rng")
        noisy = rgb.astype(float) + rng.normal(0.0, noise_sigma, rgb.shape)
        rgb = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    s = intr.size
    return rgb.reshape(s, s, 3), depth.reshape(s, s), ids.reshape(s, s)
