"""Deterministic physics-lite world model.

Scenes are value-like: every operation returns a new scene and never mutates
its input.  Settling is quasi-static — objects are checked bottom-up for
support and any unsupported object is relocated to the nearest free spot on
the ground in the +X direction, until a fixpoint is reached.  This stands in
for continuous rigid-body dynamics: end states are what the metrics need, and
the rule is deterministic and therefore testable bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.ops import unary_union

from stackeval import geometry
from stackeval.geometry import AABB, IDENTITY, Quat, Vec3
from stackeval.voxkb import FLAT, ROUND, STACK_TARGET, VoxKB, load_default_kb

# Penetration/gap threshold absorbing rounding in pose arithmetic (1 cm).
CONTACT_TOL = 0.01

# Horizontal edge-to-edge distance the agent can cross between standing
# surfaces when climbing.
ADJACENCY_REACH = 0.75

_MAX_SETTLE_PASSES = 10_000


class InvalidSpec(ValueError):
    """Scenario description violates the scene invariants."""


class Immovable(ValueError):
    """Attempt to move a non-movable object."""


class CollisionAtTarget(ValueError):
    """Target pose interpenetrates an existing object or the ground."""


class NonTermination(RuntimeError):
    """Settle failed to reach a fixpoint; signals an engine bug."""


@dataclass(frozen=True)
class SceneObject:
    id: str
    shape: str
    dimensions: Vec3
    position: Vec3
    rotation: Quat = IDENTITY
    movable: bool = True
    color: str = "blue"

    def __post_init__(self):
        if any(d <= 0 for d in self.dimensions):
            raise InvalidSpec(f"object {self.id!r} has non-positive dimensions")

    def aabb(self) -> AABB:
        return AABB(self.position, geometry.world_half_extents(self.rotation, self.dimensions))


@dataclass(frozen=True)
class Agent:
    position: Vec3 = (0.0, 0.0, 0.0)
    jump_height: float = 1.0


@dataclass(frozen=True)
class TrajectoryTrace:
    """Tick-ordered pose samples of one object under interaction."""

    object_id: str
    samples: tuple[tuple[int, Vec3, Quat], ...]
    action_context: str = ""
    end_contact: str = "flat"  # surface class under the final pose
    ended_on_ground: bool = False

    def __post_init__(self):
        if len(self.samples) < 2:
            raise InvalidSpec("trajectory traces need at least 2 samples")
        ticks = [s[0] for s in self.samples]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise InvalidSpec("trace ticks must be strictly increasing")

    @property
    def start(self) -> tuple[int, Vec3, Quat]:
        return self.samples[0]

    @property
    def end(self) -> tuple[int, Vec3, Quat]:
        return self.samples[-1]


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = ()
    agent: Agent = Agent()
    kb: VoxKB = field(default_factory=load_default_kb, compare=False, repr=False)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("duplicate object ids")

    def __getitem__(self, oid: str) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def __contains__(self, oid: str) -> bool:
        return any(o.id == oid for o in self.objects)

    def with_object(self, obj: SceneObject) -> "Scene":
        """New scene with ``obj`` replacing (or joining) the object of that id."""
        out = tuple(o for o in self.objects if o.id != obj.id) + (obj,)
        return replace(self, objects=out)

    def without_object(self, oid: str) -> "Scene":
        return replace(self, objects=tuple(o for o in self.objects if o.id != oid))

    def movables(self) -> list[SceneObject]:
        return [o for o in self.objects if o.movable]

    def habitat_of(self, obj: SceneObject):
        return self.kb.active_habitat(self.kb.lookup(obj.shape), obj.rotation)

    def poses(self) -> dict[str, tuple[Vec3, Quat]]:
        return {o.id: (o.position, o.rotation) for o in self.objects}


@dataclass(frozen=True)
class Supported:
    ok: bool = True


@dataclass(frozen=True)
class Unsupported:
    reason: str  # "free_fall" | "round_base" | "no_support_region" | "overhang"
    ok: bool = False


def spawn(spec) -> Scene:
    """Instantiate a scene from a scenario description (see scenarios module).

    Rejects interpenetrating or degenerate object lists.
    """
    objects = tuple(spec.objects)
    scene = Scene(objects=objects, agent=spec.agent, kb=spec.kb or load_default_kb())
    boxes = [(o, o.aabb()) for o in objects]
    for i, (a, abox) in enumerate(boxes):
        if abox.bottom < -CONTACT_TOL:
            raise InvalidSpec(f"object {a.id!r} starts below the ground plane")
        for b, bbox in boxes[i + 1 :]:
            if abox.penetration(bbox) > CONTACT_TOL:
                raise InvalidSpec(f"objects {a.id!r} and {b.id!r} interpenetrate")
    return scene


def place(scene: Scene, oid: str, position: Vec3, rotation: Quat | None = None) -> Scene:
    """Move one object to a pose; collision-free or resting contact required."""
    obj = scene[oid]
    if not obj.movable:
        raise Immovable(oid)
    moved = replace(
        obj,
        position=tuple(float(c) for c in position),
        rotation=obj.rotation if rotation is None else rotation,
    )
    mbox = moved.aabb()
    if mbox.bottom < -CONTACT_TOL:
        raise CollisionAtTarget(f"{oid} would sink below the ground")
    for other in scene.objects:
        if other.id == oid:
            continue
        if mbox.penetration(other.aabb()) > CONTACT_TOL:
            raise CollisionAtTarget(f"{oid} would interpenetrate {other.id}")
    return scene.with_object(moved)


def support_check(scene: Scene, oid: str):
    """Static stability test for one object.

    Ground contact always supports.  Otherwise the object must rest a flat
    base on flat top surfaces, and its center of mass must project inside the
    convex hull of the flat-flat contact regions.  Round or point surfaces on
    either side contribute no support region.
    """
    obj = scene[oid]
    abox = obj.aabb()
    if abox.bottom <= CONTACT_TOL:
        return Supported()

    supporters = []
    for other in scene.objects:
        if other.id == oid:
            continue
        obox = other.aabb()
        if abs(abox.bottom - obox.top) <= CONTACT_TOL and abox.horizontal_overlaps(obox, CONTACT_TOL):
            supporters.append((other, obox))
    if not supporters:
        return Unsupported("free_fall")

    habitat = scene.habitat_of(obj)
    if habitat.base_surface != FLAT:
        return Unsupported("round_base")

    own_foot = geometry.footprint_polygon(abox, habitat.footprint_shape)
    regions = []
    for other, obox in supporters:
        top = scene.habitat_of(other)
        if top.support_surface != FLAT:
            continue
        contact = own_foot.intersection(geometry.footprint_polygon(obox, top.footprint_shape))
        if not contact.is_empty and contact.area > 0.0:
            regions.append(contact)
    if not regions:
        return Unsupported("no_support_region")

    hull = unary_union(regions).convex_hull
    if geometry.point_in_region(obj.position[0], obj.position[2], hull):
        return Supported()
    return Unsupported("overhang")


def _ground_position(scene: Scene, obj: SceneObject) -> Vec3:
    """Nearest collision-free resting spot on the ground in the +X direction.

    Candidate x coordinates are the object's own column plus the flush-contact
    positions against every other object, so the result is exact rather than
    scanned.
    """
    half = geometry.world_half_extents(obj.rotation, obj.dimensions)
    y = float(half[1])
    x0, _, z0 = obj.position
    candidates = [float(x0)]
    for other in scene.objects:
        if other.id == obj.id:
            continue
        obox = other.aabb()
        candidates.append(float(obox.hi[0]) + float(half[0]))
    candidates.sort()

    def collides(x: float) -> bool:
        probe = AABB((x, y, z0), half)
        for other in scene.objects:
            if other.id == obj.id:
                continue
            if probe.penetration(other.aabb()) > CONTACT_TOL:
                return True
        return False

    for x in candidates:
        if x >= x0 - 1e-9 and not collides(x):
            return (float(x), y, float(z0))
    # All flush spots blocked (pathological): step past the rightmost box.
    rightmost = max(float(o.aabb().hi[0]) for o in scene.objects if o.id != obj.id)
    return (rightmost + float(half[0]) + CONTACT_TOL, y, float(z0))


def settle(scene: Scene):
    """Run the quasi-static settling loop to fixpoint.

    Returns ``(settled_scene, traces, displaced)`` where ``traces`` holds one
    trajectory per moved object (start pose, an in-flight sample, end pose)
    and ``displaced`` is the set of moved object ids.  Deterministic: object
    order is (bottom height, id) and each relocation restarts the sweep.
    """
    work = scene
    moves: dict[str, tuple[tuple[Vec3, Quat], tuple[Vec3, Quat]]] = {}
    for _ in range(_MAX_SETTLE_PASSES):
        moved = False
        order = sorted(work.movables(), key=lambda o: (o.aabb().bottom, o.id))
        for obj in order:
            result = support_check(work, obj.id)
            if result.ok:
                continue
            target = _ground_position(work, obj)
            start = moves[obj.id][0] if obj.id in moves else (obj.position, obj.rotation)
            moves[obj.id] = (start, (target, obj.rotation))
            work = work.with_object(replace(obj, position=target))
            moved = True
            break
        if not moved:
            break
    else:
        raise NonTermination("settle exceeded the pass bound")

    traces = []
    for oid in sorted(moves):
        (p0, r0), (p1, r1) = moves[oid]
        midpoint = (p1[0], p0[1], p1[2])  # lateral slide at height, then drop
        traces.append(
            TrajectoryTrace(
                object_id=oid,
                samples=((0, p0, r0), (1, midpoint, r0), (2, p1, r1)),
                action_context="settle",
                end_contact=contact_class(work, oid),
                ended_on_ground=work[oid].aabb().bottom <= CONTACT_TOL,
            )
        )
    return work, traces, set(moves)


def contact_class(scene: Scene, oid: str) -> str:
    """Class of the surface the object rests on: flat, round, point, or none."""
    obj = scene[oid]
    abox = obj.aabb()
    if abox.bottom <= CONTACT_TOL:
        return FLAT  # the ground plane
    classes = set()
    for other in scene.objects:
        if other.id == oid:
            continue
        obox = other.aabb()
        if abs(abox.bottom - obox.top) <= CONTACT_TOL and abox.horizontal_overlaps(obox, CONTACT_TOL):
            classes.add(scene.habitat_of(other).support_surface)
    for cls in (FLAT, ROUND):
        if cls in classes:
            return cls
    return "point" if classes else "none"


@dataclass(frozen=True)
class StandingSurface:
    surface_id: str  # object id or "ground"
    height: float


def _standable_surfaces(scene: Scene) -> list[tuple[StandingSurface, AABB | None]]:
    surfaces: list[tuple[StandingSurface, AABB | None]] = [
        (StandingSurface("ground", 0.0), None)
    ]
    for obj in sorted(scene.objects, key=lambda o: o.id):
        habitat = scene.habitat_of(obj)
        if habitat.support_surface == FLAT:
            box = obj.aabb()
            surfaces.append((StandingSurface(obj.id, box.top), box))
    return surfaces


def reachable(scene: Scene, agent: Agent, target_height: float):
    """Whether a chain of standable surfaces climbs to ``target_height``.

    Consecutive surfaces must differ by at most the agent's jump height and be
    horizontally adjacent (the ground is adjacent to everything).  Round or
    point top surfaces are not standable.  Returns ``(flag, path)`` with the
    path as a list of StandingSurface from the ground up.
    """
    surfaces = _standable_surfaces(scene)
    if target_height <= 0.0:
        return True, [surfaces[0][0]]

    n = len(surfaces)
    prev: list[int | None] = [None] * n
    seen = [False] * n
    seen[0] = True
    frontier = [0]
    goal = None
    while frontier and goal is None:
        nxt = []
        for ui in frontier:
            u_surf, u_box = surfaces[ui]
            for vi in range(n):
                if seen[vi]:
                    continue
                v_surf, v_box = surfaces[vi]
                if v_surf.height - u_surf.height > agent.jump_height + CONTACT_TOL:
                    continue
                if u_box is not None and v_box is not None:
                    if u_box.horizontal_gap(v_box) > ADJACENCY_REACH:
                        continue
                seen[vi] = True
                prev[vi] = ui
                if v_surf.height >= target_height - CONTACT_TOL:
                    goal = vi
                    break
                nxt.append(vi)
            if goal is not None:
                break
        frontier = nxt

    if goal is None:
        return False, []
    path = []
    node: int | None = goal
    while node is not None:
        path.append(surfaces[node][0])
        node = prev[node]
    path.reverse()
    return True, path
