"""Free-text manipulation plans: parsing, grounding, and execution.

The parser is a constrained pattern grammar (verb lexicon x prepositional
frames), not a language model: scoring must be deterministic and offline.
Sentences that do not describe moving or placing an object become Ignore
steps and are carried verbatim.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from stackeval import geometry, simcore
from stackeval.geometry import IDENTITY, Quat, Vec3
from stackeval.simcore import (
    CONTACT_TOL,
    CollisionAtTarget,
    Immovable,
    Scene,
    SceneObject,
    TrajectoryTrace,
    place,
    settle,
)
from stackeval.voxkb import FLAT


class UnknownObject(LookupError):
    """An object reference matches nothing in the scene."""


# ---------------------------------------------------------------------------
# Vocabulary

SHAPE_ALIASES = {
    "ball": "sphere",
    "block": "cube",
    "box": "cube",
    "floor": "ground",
}

SHAPE_WORDS = [
    "cuboid", "cube", "pyramid", "wedge", "sphere", "ball", "egg",
    "ellipsoid", "capsule", "cylinder", "block", "box", "platform",
    "ground", "floor",
]

COLORS = ["blue", "red", "green", "yellow", "white", "black", "gray", "grey",
          "orange", "purple"]

SIZE_WORDS = {"big": "big", "large": "big", "bigger": "big", "larger": "big",
              "small": "small", "tiny": "small", "smaller": "small",
              "little": "small"}

COUNT_WORDS = {"two": 2, "both": 2, "three": 3, "four": 4, "five": 5, "six": 6}
_COUNT_RENDER = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}

PLACE_VERBS = {"place", "put", "stack", "position", "move", "lay", "set", "stand"}
ROTATE_VERBS = {"rotate"}
CLIMB_VERBS = {"climb", "jump"}

_VERB_FORMS = {
    "place": ["placing", "placed", "places", "place"],
    "put": ["putting", "puts", "put"],
    "stack": ["stacking", "stacked", "stacks", "stack"],
    "position": ["positioning", "positioned", "positions", "position"],
    "move": ["moving", "moved", "moves", "move"],
    "lay": ["laying", "laid", "lays", "lay"],
    "set": ["setting", "sets", "set"],
    "stand": ["standing", "stood", "stands", "stand"],
    "rotate": ["rotating", "rotated", "rotates", "rotate"],
    "climb": ["climbing", "climbed", "climbs", "climb"],
    "jump": ["jumping", "jumped", "jumps", "jump"],
}
_FORM_TO_VERB = {form: verb for verb, forms in _VERB_FORMS.items() for form in forms}
_VERB_RE = "|".join(sorted(_FORM_TO_VERB, key=len, reverse=True))

UPRIGHT = "upright"
SIDEWAYS = "sideways"

_UPRIGHT_PHRASES = r"flat side down|flat end down|upright|vertically|on its flat end"
_SIDEWAYS_PHRASES = r"on its side|onto its side|on its round side|horizontally|sideways"

# Frame patterns, matched longest-first at the earliest position.
_FRAMES: list[tuple[str, str]] = [
    ("chain", r"\bon top of each other\b|\bon each other\b"),
    ("on_top", r"\bon top of\b|\batop\b"),
    ("next_to", r"\bnext to\b|\bbeside\b"),
    ("in_front_of", r"\bin front of\b"),
    ("behind", r"\bbehind\b"),
    ("left_of", r"\bto the left of\b|\bleft of\b"),
    ("right_of", r"\bto the right of\b|\bright of\b"),
    ("near", r"\bnear\b|\bclose to\b"),
    ("on_ground", r"\bon the ground\b|\bon the floor\b"),
    ("at_point", r"\bat (?:position )?\(?\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)?"),
    ("on_top", r"\bonto\b|\bup onto\b"),
    ("bare_on", r"\bon\b(?! the left\b)(?! the right\b)(?! its\b)(?! each\b)(?! all\b)"),
]

_PURPOSE_RE = re.compile(
    r"\s+(?:to reach\b|to get\b|to climb\b|to make\b|so that\b|so you\b|"
    r"in order to\b|which\b|creating\b|giving\b|making\b).*$"
)


# ---------------------------------------------------------------------------
# Plan data types

@dataclass(frozen=True)
class ObjectRef:
    """A (possibly underspecified) reference to scene objects."""

    shape: str
    color: str | None = None
    size: str | None = None
    position_hint: str | None = None  # "left" | "right" | "front" | "back"
    distinct: bool = False            # "the other ..." -- excludes prior bindings
    plural: bool = False
    count: int | None = None
    bound_ids: tuple[str, ...] = ()
    bound_movable: bool = True

    @property
    def bound_id(self) -> str | None:
        return self.bound_ids[0] if self.bound_ids else None

    def describe(self) -> str:
        bits = []
        if self.distinct:
            bits.append("other")
        if self.size:
            bits.append(self.size)
        if self.color:
            bits.append(self.color)
        bits.append(self.shape + ("s" if self.plural else ""))
        return " ".join(bits)


@dataclass(frozen=True)
class PlaceOn:
    obj: ObjectRef
    base: ObjectRef
    orientation: str | None = None
    target_position: Vec3 | None = None
    target_rotation: Quat | None = None


@dataclass(frozen=True)
class PlaceAt:
    obj: ObjectRef
    relation: str  # on_ground|anywhere|next_to|in_front_of|behind|left_of|right_of|near|at_point
    anchor: ObjectRef | None = None
    point: tuple[float, float] | None = None
    orientation: str | None = None
    target_position: Vec3 | None = None
    target_rotation: Quat | None = None


@dataclass(frozen=True)
class Rotate:
    obj: ObjectRef
    orientation: str  # upright | sideways
    target_position: Vec3 | None = None
    target_rotation: Quat | None = None


@dataclass(frozen=True)
class Climb:
    target: ObjectRef


@dataclass(frozen=True)
class Ignore:
    text: str


Action = PlaceOn | PlaceAt | Rotate | Climb | Ignore


@dataclass(frozen=True)
class Plan:
    steps: tuple[Action, ...] = ()

    def refs(self) -> list[ObjectRef]:
        out = []
        for step in self.steps:
            if isinstance(step, PlaceOn):
                out += [step.obj, step.base]
            elif isinstance(step, PlaceAt):
                out.append(step.obj)
                if step.anchor is not None:
                    out.append(step.anchor)
            elif isinstance(step, Rotate):
                out.append(step.obj)
            elif isinstance(step, Climb):
                out.append(step.target)
        return out

    def selected_objects(self) -> dict[str, str]:
        """Distinct movable object ids bound in non-Ignore steps, id -> shape.

        Recomputable from the steps alone; empty for ungrounded plans.
        """
        out: dict[str, str] = {}
        for ref in self.refs():
            if not ref.bound_movable:
                continue
            for oid in ref.bound_ids:
                out.setdefault(oid, ref.shape)
        return out

    def is_grounded(self) -> bool:
        return all(r.bound_ids or not r.bound_movable for r in self.refs())


# ---------------------------------------------------------------------------
# Parsing

def _normalize_shape(word: str) -> str:
    if word == "boxes":
        singular = "box"
    elif word.endswith("s") and word not in ("ground",):
        singular = word[:-1]
    else:
        singular = word
    return SHAPE_ALIASES.get(singular, singular)


_SHAPE_RE = re.compile(
    r"\b(boxes|"
    + "|".join(w + "s?" if w not in ("ground", "floor", "box") else w for w in SHAPE_WORDS)
    + r")\b"
)
_HINT_RE = re.compile(r"^\s*(on the left|leftmost|on the right|rightmost|in front|at the back|nearest|closest)\b")
_HINT_MAP = {
    "on the left": "left", "leftmost": "left",
    "on the right": "right", "rightmost": "right",
    "in front": "front", "nearest": "front", "closest": "front",
    "at the back": "back",
}


def parse_ref(text: str) -> ObjectRef | None:
    """Extract one object reference from a text fragment, or None."""
    low = text.lower()
    m = _SHAPE_RE.search(low)
    if m is None:
        return None
    word = m.group(1)
    shape = _normalize_shape(word)
    plural = word.endswith("s") and word not in ("ground",)
    pre = low[: m.start()]
    post = low[m.end():]

    color = next((c for c in COLORS if re.search(rf"\b{c}\b", pre)), None)
    if color == "grey":
        color = "gray"
    size = None
    for w, canon in SIZE_WORDS.items():
        if re.search(rf"\b{w}\b", pre):
            size = canon
            break
    count = None
    for w, n in COUNT_WORDS.items():
        if re.search(rf"\b{w}\b", pre):
            count = n
            break
    distinct = bool(re.search(r"\b(other|another|second)\b", pre))
    hint_m = _HINT_RE.match(post)
    hint = _HINT_MAP[hint_m.group(1)] if hint_m else None
    return ObjectRef(
        shape=shape, color=color, size=size, position_hint=hint,
        distinct=distinct, plural=plural, count=count,
    )


def _split_refs(text: str) -> list[ObjectRef]:
    refs = []
    for chunk in re.split(r"\band\b|,", text):
        ref = parse_ref(chunk)
        if ref is not None:
            refs.append(ref)
    return refs


def _find_frame(text: str):
    """Earliest frame match in ``text``; longest pattern wins at equal start."""
    best = None
    for kind, pattern in _FRAMES:
        m = re.search(pattern, text)
        if m is None:
            continue
        key = (m.start(), -(m.end() - m.start()))
        if best is None or key < best[0]:
            best = (key, kind, m)
    if best is None:
        return None, None
    return best[1], best[2]


def _extract_orientation(verb: str, text: str) -> tuple[str | None, str]:
    m = re.search(_UPRIGHT_PHRASES, text)
    if m:
        return UPRIGHT, (text[: m.start()] + " " + text[m.end():]).strip()
    m = re.search(_SIDEWAYS_PHRASES, text)
    if m:
        return SIDEWAYS, (text[: m.start()] + " " + text[m.end():]).strip()
    if verb == "stand":
        return UPRIGHT, text
    if verb == "lay":
        return SIDEWAYS, text
    return None, text


def _parse_clause(clause: str) -> Action:
    original = clause.strip()
    low = original.lower().rstrip(".!?").strip()

    passive = re.match(
        rf"^(?P<subj>.+?)\s+(?:should|could|can|must|will|would|may)\s+be\s+"
        rf"(?P<verb>{_VERB_RE})\b\s*(?P<rest>.*)$",
        low,
    )
    if passive:
        verb = _FORM_TO_VERB[passive.group("verb")]
        return _parse_motion(original, verb, passive.group("subj"), passive.group("rest"))

    m = re.search(rf"\b(?P<verb>{_VERB_RE})\b", low)
    if m is None:
        return Ignore(original)
    verb = _FORM_TO_VERB[m.group("verb")]
    post = low[m.end():].strip()

    if verb in CLIMB_VERBS:
        target = parse_ref(post)
        if target is None:
            return Ignore(original)
        return Climb(target=target)

    if verb in ROTATE_VERBS:
        orientation, remainder = _extract_orientation(verb, post)
        ref = parse_ref(remainder)
        if ref is None:
            return Ignore(original)
        return Rotate(obj=ref, orientation=orientation or UPRIGHT)

    return _parse_motion(original, verb, None, post)


def _parse_motion(original: str, verb: str, subj: str | None, post: str) -> Action:
    orientation, post = _extract_orientation(verb, post)
    frame, fm = _find_frame(post)

    obj_text = subj if subj is not None else (post[: fm.start()] if fm else post)
    tail = post[fm.end():] if fm else ""
    tail = _PURPOSE_RE.sub("", tail).strip()
    obj_text = _PURPOSE_RE.sub("", obj_text or "").strip()

    refs = _split_refs(obj_text)
    if not refs:
        # Agent motion phrased with a placement verb ("stand on the cube").
        if frame in ("on_top", "bare_on"):
            target = parse_ref(tail)
            if target is not None:
                return Climb(target=target)
        return Ignore(original)

    if frame == "chain" or (frame is None and verb == "stack" and len(refs) >= 2):
        if len(refs) >= 2:
            return PlaceOn(obj=refs[-1], base=refs[0], orientation=orientation)
        return PlaceOn(obj=refs[0], base=refs[0], orientation=orientation)

    if frame in ("on_top", "bare_on"):
        base = parse_ref(tail)
        if base is None:
            return Ignore(original)
        if base.shape == "ground":
            return PlaceAt(obj=refs[0], relation="on_ground", orientation=orientation)
        return PlaceOn(obj=refs[0], base=base, orientation=orientation)

    if frame == "on_ground":
        return PlaceAt(obj=refs[0], relation="on_ground", orientation=orientation)

    if frame == "at_point":
        point = (float(fm.group(1)), float(fm.group(2)))
        return PlaceAt(obj=refs[0], relation="at_point", point=point, orientation=orientation)

    if frame in ("next_to", "in_front_of", "behind", "left_of", "right_of", "near"):
        anchor = parse_ref(tail)
        if anchor is None:
            return Ignore(original)
        return PlaceAt(obj=refs[0], relation=frame, anchor=anchor, orientation=orientation)

    return PlaceAt(obj=refs[0], relation="anywhere", orientation=orientation)


_LINE_NUMBER_RE = re.compile(r"(^|\n)\s*(?:\d+[.)]|[-*•])\s+")
_INLINE_NUMBER_RE = re.compile(r"\s+\d+[.)]\s+(?=[A-Z])")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z0-9(])")
_CLAUSE_RE = re.compile(
    rf",\s*(?:and\s+)?then\s+|;\s*|\s+and\s+then\s+|,\s+(?:and\s+)?(?=(?:{_VERB_RE})\b)"
)


def split_steps(text: str) -> list[str]:
    """Break free text into step-sized fragments (sentences and verb clauses)."""
    cleaned = _LINE_NUMBER_RE.sub(r"\1", text)
    cleaned = _INLINE_NUMBER_RE.sub(". ", cleaned)
    fragments = []
    for line in cleaned.splitlines():
        line = line.strip()
        if not line:
            continue
        for sentence in _SENTENCE_RE.split(line):
            for clause in _CLAUSE_RE.split(sentence):
                clause = clause.strip()
                if clause:
                    fragments.append(clause)
    return fragments


def parse(text: str) -> Plan:
    """Map free text to a Plan; total on any input (unparseable prose -> Ignore)."""
    return Plan(steps=tuple(_parse_clause(c) for c in split_steps(text)))


# ---------------------------------------------------------------------------
# Rendering (canonical inverse of parse)

def _render_ref(ref: ObjectRef) -> str:
    bits = ["the"]
    if ref.distinct:
        bits.append("other")
    if ref.count is not None and ref.count in _COUNT_RENDER:
        bits.append(_COUNT_RENDER[ref.count])
    if ref.size:
        bits.append(ref.size)
    if ref.color:
        bits.append(ref.color)
    bits.append(ref.shape + ("s" if ref.plural else ""))
    text = " ".join(bits)
    if ref.position_hint == "left":
        text += " on the left"
    elif ref.position_hint == "right":
        text += " on the right"
    elif ref.position_hint == "front":
        text += " in front"
    elif ref.position_hint == "back":
        text += " at the back"
    return text


def _placement_verb(orientation: str | None) -> tuple[str, str]:
    if orientation == UPRIGHT:
        return "Stand", " upright"
    if orientation == SIDEWAYS:
        return "Lay", " on its side"
    return "Place", ""


def render_action(action: Action) -> str:
    if isinstance(action, Ignore):
        return action.text
    if isinstance(action, Climb):
        return f"Climb onto {_render_ref(action.target)}."
    if isinstance(action, Rotate):
        tail = "upright" if action.orientation == UPRIGHT else "onto its side"
        return f"Rotate {_render_ref(action.obj)} {tail}."
    verb, mod = _placement_verb(action.orientation)
    if isinstance(action, PlaceOn):
        return f"{verb} {_render_ref(action.obj)}{mod} on top of {_render_ref(action.base)}."
    rel = action.relation
    obj = _render_ref(action.obj)
    if rel == "on_ground":
        return f"{verb} {obj}{mod} on the ground."
    if rel == "anywhere":
        return f"{verb} {obj}{mod}."
    if rel == "at_point":
        x, z = action.point
        return f"{verb} {obj}{mod} at ({x:g}, {z:g})."
    frames = {
        "next_to": "next to", "in_front_of": "in front of", "behind": "behind",
        "left_of": "to the left of", "right_of": "to the right of", "near": "near",
    }
    return f"{verb} {obj}{mod} {frames[rel]} {_render_ref(action.anchor)}."


def render(plan: Plan) -> str:
    return "\n".join(render_action(a) for a in plan.steps)


# ---------------------------------------------------------------------------
# Grounding

def _dist_to_agent(obj: SceneObject, scene: Scene) -> float:
    a = np.asarray(scene.agent.position)
    return float(np.linalg.norm(np.asarray(obj.position) - a))


def _match_candidates(
    ref: ObjectRef, scene: Scene, used: list[str], exclude: set[str]
) -> list[SceneObject]:
    cands = []
    for obj in scene.objects:
        if obj.id in exclude:
            continue
        if obj.shape != ref.shape:
            continue
        if ref.color and obj.color != ref.color:
            continue
        cands.append(obj)
    if ref.distinct:
        fresh = [o for o in cands if o.id not in used]
        if fresh:
            cands = fresh
    if ref.size and len(cands) > 1:
        volumes = {o.id: o.dimensions[0] * o.dimensions[1] * o.dimensions[2] for o in cands}
        pick = max(volumes.values()) if ref.size == "big" else min(volumes.values())
        cands = [o for o in cands if volumes[o.id] == pick]
    if ref.position_hint and len(cands) > 1:
        if ref.position_hint == "left":
            key = min(cands, key=lambda o: (o.position[0], o.id))
            cands = [key]
        elif ref.position_hint == "right":
            key = max(cands, key=lambda o: (o.position[0], o.id))
            cands = [key]
        elif ref.position_hint == "front":
            key = min(cands, key=lambda o: (_dist_to_agent(o, scene), o.id))
            cands = [key]
        elif ref.position_hint == "back":
            key = max(cands, key=lambda o: (_dist_to_agent(o, scene), o.id))
            cands = [key]
    # Re-mentions resolve to the most recently used matching object (discourse
    # recency); otherwise ambiguity breaks by nearest-to-agent, then id.
    def rank(obj: SceneObject):
        recency = used[::-1].index(obj.id) if (not ref.distinct and obj.id in used) else len(used)
        return (recency, _dist_to_agent(obj, scene), obj.id)

    return sorted(cands, key=rank)


def _bind(ref: ObjectRef, scene: Scene, used: list[str], exclude: set[str] | None = None) -> ObjectRef:
    if ref.bound_ids:
        return ref
    cands = _match_candidates(ref, scene, used, exclude or set())
    if not cands:
        raise UnknownObject(ref.describe())
    if ref.plural:
        limit = ref.count if ref.count else len(cands)
        chosen = cands[:limit]
    else:
        chosen = cands[:1]
    return replace(
        ref,
        bound_ids=tuple(o.id for o in chosen),
        bound_movable=all(o.movable for o in chosen),
    )


def _support_extent(obj: SceneObject, direction: np.ndarray) -> float:
    half = geometry.world_half_extents(obj.rotation, obj.dimensions)
    return abs(direction[0]) * float(half[0]) + abs(direction[2]) * float(half[2])


def _collides(scene: Scene, oid: str, position: Vec3, rotation: Quat) -> bool:
    half = geometry.world_half_extents(rotation, scene[oid].dimensions)
    probe = geometry.AABB(position, half)
    for other in scene.objects:
        if other.id == oid:
            continue
        if probe.penetration(other.aabb()) > CONTACT_TOL:
            return True
    return False


def upright_rotation(scene: Scene, obj: SceneObject) -> Quat:
    """Orientation that brings the first flat-base habitat's up axis to world up."""
    vox = scene.kb.lookup(obj.shape)
    for habitat in vox.habitats:
        if habitat.base_surface == FLAT:
            return geometry.quat_aligning(habitat.up_axis, (0.0, 1.0, 0.0))
    return IDENTITY


def sideways_rotation() -> Quat:
    return geometry.quat_aligning((0.0, 1.0, 0.0), (1.0, 0.0, 0.0))


def _oriented(scene: Scene, obj: SceneObject, orientation: str | None) -> Quat:
    if orientation == UPRIGHT:
        return upright_rotation(scene, obj)
    if orientation == SIDEWAYS:
        return sideways_rotation()
    return obj.rotation


def _rest_y(scene: Scene, obj: SceneObject, rotation: Quat) -> float:
    return float(geometry.world_half_extents(rotation, obj.dimensions)[1])


_DIRECTION_ORDER = {
    "in_front_of": ("front",),
    "behind": ("back",),
    "left_of": ("left",),
    "right_of": ("right",),
    "next_to": ("front", "left", "right", "back"),
    "near": ("front", "left", "right", "back"),
}


def _relation_directions(relation: str, anchor: SceneObject, scene: Scene) -> list[np.ndarray]:
    view = np.asarray(anchor.position, dtype=float) - np.asarray(scene.agent.position, dtype=float)
    view[1] = 0.0
    n = np.linalg.norm(view)
    view = view / n if n > 1e-9 else np.array([1.0, 0.0, 0.0])
    left = np.cross([0.0, 1.0, 0.0], view)
    table = {"front": -view, "back": view, "left": left, "right": -left}
    return [table[d] for d in _DIRECTION_ORDER[relation]]


def resolve(plan: Plan, scene: Scene, seed: int) -> Plan:
    """Bind references to scene objects and sample underspecified placements.

    Ambiguous references go to the nearest matching object; positions are
    sampled from the constraint-satisfying region with the given seed.
    Deterministic given (plan, scene, seed).  Anchors refer to in-plan
    positions: each step is grounded against a scratch scene that reflects
    the placements before it.
    """
    rng = np.random.default_rng(int(seed))
    scratch = scene
    used: list[str] = []
    steps: list[Action] = []

    def mark_used(ids):
        used.extend(ids)

    for action in plan.steps:
        if isinstance(action, Ignore):
            steps.append(action)
            continue

        if isinstance(action, Climb):
            target = _bind(action.target, scratch, used)
            mark_used(target.bound_ids)
            steps.append(replace(action, target=target))
            continue

        if isinstance(action, Rotate):
            ref = _bind(action.obj, scratch, used)
            mark_used(ref.bound_ids)
            obj = scratch[ref.bound_id]
            rot = _oriented(scratch, obj, action.orientation)
            bottom = obj.aabb().bottom
            pos = (obj.position[0], bottom + _rest_y(scratch, obj, rot), obj.position[2])
            steps.append(replace(action, obj=ref, target_position=pos, target_rotation=rot))
            scratch = scratch.with_object(replace(obj, position=pos, rotation=rot))
            continue

        if isinstance(action, PlaceOn):
            obj_ref = _bind(action.obj, scratch, used)
            mark_used(obj_ref.bound_ids)
            if action.base == action.obj and len(obj_ref.bound_ids) >= 2:
                # Self-chain ("stack the cubes on top of each other"):
                # second instance goes onto the first.
                ids = obj_ref.bound_ids
                base_ref = replace(action.base, bound_ids=(ids[0],),
                                   bound_movable=obj_ref.bound_movable)
                obj_ref = replace(obj_ref, bound_ids=(ids[1], ids[0]) + ids[2:])
                moving = scratch[obj_ref.bound_id]
            else:
                base_ref = _bind(action.base, scratch, used,
                                 exclude=set(obj_ref.bound_ids))
                moving = scratch[obj_ref.bound_id]
            mark_used(base_ref.bound_ids)
            bases = [scratch[b] for b in base_ref.bound_ids]
            base = max(bases, key=lambda o: (o.aabb().top, o.id))
            rot = _oriented(scratch, moving, action.orientation)
            pos = (
                base.position[0],
                base.aabb().top + _rest_y(scratch, moving, rot),
                base.position[2],
            )
            steps.append(replace(action, obj=obj_ref, base=base_ref,
                                 target_position=pos, target_rotation=rot))
            scratch = scratch.with_object(replace(moving, position=pos, rotation=rot))
            continue

        # PlaceAt
        obj_ref = _bind(action.obj, scratch, used)
        mark_used(obj_ref.bound_ids)
        moving = scratch[obj_ref.bound_id]
        rot = _oriented(scratch, moving, action.orientation)
        rest = _rest_y(scratch, moving, rot)
        anchor_ref = None

        if action.relation == "at_point":
            pos = (action.point[0], rest, action.point[1])
        elif action.relation in ("on_ground", "anywhere"):
            agent = np.asarray(scene.agent.position, dtype=float)
            pos = None
            for attempt in range(40):
                theta = rng.uniform(0.0, 2.0 * math.pi)
                radius = rng.uniform(1.2, 2.5 + 0.25 * attempt)
                cand = (float(agent[0] + radius * math.cos(theta)), rest,
                        float(agent[2] + radius * math.sin(theta)))
                if not _collides(scratch, moving.id, cand, rot):
                    pos = cand
                    break
            if pos is None:
                gp = simcore._ground_position(scratch, replace(moving, rotation=rot))
                pos = (gp[0], rest, gp[2])
        else:
            anchor_ref = _bind(action.anchor, scratch, used, exclude=set(obj_ref.bound_ids))
            mark_used(anchor_ref.bound_ids)
            anchors = [scratch[a] for a in anchor_ref.bound_ids]
            anchor = max(anchors, key=lambda o: (o.aabb().top, o.id))
            pos = None
            for direction in _relation_directions(action.relation, anchor, scratch):
                for attempt in range(6):
                    gap = float(rng.uniform(0.0, 0.2)) + 0.15 * attempt
                    offset = _support_extent(anchor, direction) + _support_extent(
                        replace(moving, rotation=rot), direction) + gap
                    cand = (
                        float(anchor.position[0] + direction[0] * offset),
                        rest,
                        float(anchor.position[2] + direction[2] * offset),
                    )
                    if not _collides(scratch, moving.id, cand, rot):
                        pos = cand
                        break
                if pos is not None:
                    break
            if pos is None:
                raise UnknownObject(
                    f"no free region {action.relation} {action.anchor.describe()}"
                )

        steps.append(replace(action, obj=obj_ref, anchor=anchor_ref,
                             target_position=pos, target_rotation=rot))
        scratch = scratch.with_object(replace(moving, position=pos, rotation=rot))

    return Plan(steps=tuple(steps))


# ---------------------------------------------------------------------------
# Execution

@dataclass(frozen=True)
class StepOutcome:
    status: str  # "executed" | "failed" | "skipped"
    reason: str | None = None
    moved: tuple[str, Vec3, Quat] | None = None


@dataclass(frozen=True)
class ExecutionTrace:
    outcomes: tuple[StepOutcome, ...]
    final_scene: Scene
    traces: tuple[TrajectoryTrace, ...]
    displaced: frozenset[str]
    placed: tuple[tuple[str, Vec3, Quat], ...]  # intended poses, in placement order
    mode: str

    @property
    def failure_step(self) -> int | None:
        for i, o in enumerate(self.outcomes):
            if o.status == "failed":
                return i
        return None

    def placed_poses(self) -> dict[str, tuple[Vec3, Quat]]:
        return {oid: (pos, rot) for oid, pos, rot in self.placed}


STRICT = "strict"
PERMISSIVE = "permissive"


def operationalize(plan: Plan, scene: Scene, mode: str = STRICT) -> ExecutionTrace:
    """Execute a grounded plan step by step.

    Strict mode settles after every placement and fails the step if the placed
    object is immediately displaced; permissive mode applies all placements
    and settles once at the end, so only hard errors (collision, immovable
    object) fail a step.  Steps after the first failure are not executed.
    """
    if mode not in (STRICT, PERMISSIVE):
        raise ValueError(f"unknown mode {mode!r}")
    if not plan.is_grounded():
        raise ValueError("plan must be resolved before operationalization")

    work = scene
    outcomes: list[StepOutcome] = []
    all_traces: list[TrajectoryTrace] = []
    displaced: set[str] = set()
    placed: list[tuple[str, Vec3, Quat]] = []
    agent_height = 0.0
    failed = False

    for action in plan.steps:
        if failed:
            outcomes.append(StepOutcome(status="skipped"))
            continue

        if isinstance(action, Ignore):
            outcomes.append(StepOutcome(status="executed"))
            continue

        if isinstance(action, Climb):
            target = work[action.target.bound_id]
            habitat = work.habitat_of(target)
            top = target.aabb().top
            if habitat.support_surface != FLAT:
                outcomes.append(StepOutcome(status="failed", reason="not standable"))
                failed = True
            elif top - agent_height > scene.agent.jump_height + CONTACT_TOL:
                outcomes.append(StepOutcome(status="failed", reason="too high to jump"))
                failed = True
            else:
                agent_height = top
                outcomes.append(StepOutcome(status="executed"))
            continue

        oid = action.obj.bound_id
        try:
            work = place(work, oid, action.target_position, action.target_rotation)
        except (CollisionAtTarget, Immovable) as exc:
            outcomes.append(StepOutcome(status="failed", reason=f"{type(exc).__name__}: {exc}"))
            failed = True
            continue

        placed.append((oid, action.target_position, action.target_rotation))
        if mode == STRICT:
            work, traces, moved = settle(work)
            all_traces.extend(traces)
            displaced.update(moved)
            if oid in moved:
                outcomes.append(StepOutcome(status="failed", reason="unstable placement"))
                failed = True
                continue
        outcomes.append(
            StepOutcome(status="executed",
                        moved=(oid, action.target_position, action.target_rotation))
        )

    if mode == PERMISSIVE:
        work, traces, moved = settle(work)
        all_traces.extend(traces)
        displaced.update(moved)

    return ExecutionTrace(
        outcomes=tuple(outcomes),
        final_scene=work,
        traces=tuple(all_traces),
        displaced=frozenset(displaced),
        placed=tuple(placed),
        mode=mode,
    )
