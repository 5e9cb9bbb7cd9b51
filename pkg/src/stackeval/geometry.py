"""Shared 3D/2D geometry helpers: quaternion poses, world AABBs, footprint polygons.

Rotations are stored as plain ``(x, y, z, w)`` tuples so scene objects stay
hashable and bit-exactly comparable; the math goes through scipy.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.transform import Rotation
from shapely.geometry import Point, Polygon, box
from shapely import affinity

Quat = tuple[float, float, float, float]
Vec3 = tuple[float, float, float]

IDENTITY: Quat = (0.0, 0.0, 0.0, 1.0)
WORLD_UP = np.array([0.0, 1.0, 0.0])

# 64-gon used whenever an elliptical footprint is rasterized for region math.
_UNIT_CIRCLE = Point(0.0, 0.0).buffer(1.0, quad_segs=16)


def quat_from_axis_angle(axis: Vec3, degrees: float) -> Quat:
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("rotation axis must be non-zero")
    rot = Rotation.from_rotvec(math.radians(degrees) * a / n)
    return tuple(float(c) for c in rot.as_quat())


def quat_apply(q: Quat, v) -> np.ndarray:
    return Rotation.from_quat(q).apply(np.asarray(v, dtype=float))


def quat_compose(outer: Quat, inner: Quat) -> Quat:
    """Rotation equal to applying ``inner`` first, then ``outer``."""
    rot = Rotation.from_quat(outer) * Rotation.from_quat(inner)
    return tuple(float(c) for c in rot.as_quat())


def quat_aligning(src: Vec3, dst: Vec3) -> Quat:
    """Minimal rotation carrying direction ``src`` onto direction ``dst``."""
    a = np.asarray(src, dtype=float)
    b = np.asarray(dst, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if dot > 1.0 - 1e-12:
        return IDENTITY
    if dot < -1.0 + 1e-12:
        # Antiparallel: rotate half a turn about any axis orthogonal to a.
        ortho = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(ortho) < 1e-9:
            ortho = np.cross(a, [0.0, 0.0, 1.0])
        ortho = ortho / np.linalg.norm(ortho)
        rot = Rotation.from_rotvec(math.pi * ortho)
        return tuple(float(c) for c in rot.as_quat())
    axis = np.cross(a, b)
    axis = axis / np.linalg.norm(axis)
    rot = Rotation.from_rotvec(math.acos(dot) * axis)
    return tuple(float(c) for c in rot.as_quat())


def angle_between(q: Quat, local_axis: Vec3, world_dir=WORLD_UP) -> float:
    """Angle in radians between a rotated local axis and a world direction."""
    v = quat_apply(q, local_axis)
    v = v / np.linalg.norm(v)
    w = np.asarray(world_dir, dtype=float)
    w = w / np.linalg.norm(w)
    return math.acos(float(np.clip(np.dot(v, w), -1.0, 1.0)))


def tilt_between(q0: Quat, q1: Quat) -> float:
    """Angle between the world images of the local up axis under two rotations."""
    u0 = quat_apply(q0, (0.0, 1.0, 0.0))
    u1 = quat_apply(q1, (0.0, 1.0, 0.0))
    u0 = u0 / np.linalg.norm(u0)
    u1 = u1 / np.linalg.norm(u1)
    return math.acos(float(np.clip(np.dot(u0, u1), -1.0, 1.0)))


def world_half_extents(q: Quat, dims: Vec3) -> np.ndarray:
    """Half extents of the world-axis-aligned box bounding the rotated object."""
    half = np.asarray(dims, dtype=float) / 2.0
    m = np.abs(Rotation.from_quat(q).as_matrix())
    return m @ half


class AABB:
    """World axis-aligned bounding box with the interval tests settle relies on."""

    __slots__ = ("lo", "hi")

    def __init__(self, center, half: np.ndarray):
        c = np.asarray(center, dtype=float)
        self.lo = c - half
        self.hi = c + half

    @property
    def bottom(self) -> float:
        return float(self.lo[1])

    @property
    def top(self) -> float:
        return float(self.hi[1])

    def penetration(self, other: "AABB") -> float:
        """Smallest per-axis overlap; positive only when boxes interpenetrate."""
        overlap = np.minimum(self.hi, other.hi) - np.maximum(self.lo, other.lo)
        return float(overlap.min())

    def horizontal_gap(self, other: "AABB") -> float:
        """Edge-to-edge distance between horizontal footprints (0 if overlapping)."""
        dx = max(self.lo[0] - other.hi[0], other.lo[0] - self.hi[0], 0.0)
        dz = max(self.lo[2] - other.hi[2], other.lo[2] - self.hi[2], 0.0)
        return math.hypot(dx, dz)

    def horizontal_overlaps(self, other: "AABB", tol: float) -> bool:
        return (
            self.lo[0] < other.hi[0] + tol
            and other.lo[0] < self.hi[0] + tol
            and self.lo[2] < other.hi[2] + tol
            and other.lo[2] < self.hi[2] + tol
        )


def footprint_polygon(aabb: AABB, shape: str) -> Polygon:
    """Horizontal footprint of a box as a shapely polygon.

    ``shape`` is ``rect`` for the full rectangle or ``ellipse`` for the
    inscribed ellipse (disks of upright cylinders, etc.).
    """
    cx = (aabb.lo[0] + aabb.hi[0]) / 2.0
    cz = (aabb.lo[2] + aabb.hi[2]) / 2.0
    hx = (aabb.hi[0] - aabb.lo[0]) / 2.0
    hz = (aabb.hi[2] - aabb.lo[2]) / 2.0
    if shape == "ellipse":
        poly = affinity.scale(_UNIT_CIRCLE, xfact=hx, yfact=hz, origin=(0, 0))
        return affinity.translate(poly, xoff=cx, yoff=cz)
    return box(cx - hx, cz - hz, cx + hx, cz + hz)


def point_in_region(x: float, z: float, region) -> bool:
    return bool(region.covers(Point(x, z)))
