"""Failure-triggered exploration.

When a plan step fails, the agent probes objects by stacking each one on a
unit cube at its own position, featurizes the resulting trajectory, grounds
the behavior to the flat or round cluster of a similarity-learned embedding
space, determines the orientation (habitat) under which an object is
stackable, and synthesizes a staircase plan to the target height.

The grounding model is a small learned linear map trained with a pairwise
contrastive objective over trajectory features, classified by cosine k-NN.
Mixed-behavior shapes (the cylinder) are never part of the training set; they
are grounded by analogy to the pure flat/round references.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from stackeval import geometry
from stackeval.geometry import IDENTITY, Quat
from stackeval.planlang import (
    ExecutionTrace,
    ObjectRef,
    Plan,
    PlaceAt,
    PlaceOn,
    STRICT,
    operationalize,
)
from stackeval.simcore import (
    CONTACT_TOL,
    Agent,
    Immovable,
    Scene,
    SceneObject,
    TrajectoryTrace,
    contact_class,
    settle,
)
from stackeval.voxkb import FLAT, ROUND, STACK_TARGET, VoxKB, load_default_kb

FEATURE_NAMES = (
    "vertical_drop",      # m, start height minus end height
    "lateral_drift",      # m, horizontal distance travelled
    "max_tilt",           # rad, largest up-axis change along the trace
    "settled_on_ground",  # 1.0 if the object ended on the ground plane
    "contact_flat",       # one-hot: class of the final resting surface
    "contact_round",
    "contact_point",
    "trace_length",       # number of samples
)

FLAT_LABEL = "flat"
ROUND_LABEL = "round"

PROBE_CUBE_ID = "__probe_cube__"
PROBE_SAMPLES_PER_HABITAT = 10
PROBE_JITTER = 0.01  # m

MODEL_FORMAT_VERSION = 1


class DegenerateTrace(ValueError):
    """Trace has too few samples to featurize."""


class InsufficientData(ValueError):
    """Not enough labeled samples to train the grounding model."""


class NoFlatHabitat(LookupError):
    """No orientation of the object grounds to the flat cluster."""


class Unsolvable(RuntimeError):
    """Not enough flat-groundable objects to span the target height."""


# ---------------------------------------------------------------------------
# Probing and featurization

def detect_failure(trace: ExecutionTrace) -> int | None:
    """Index of the first failed step of a strict-mode trace, or None."""
    if trace.mode != STRICT:
        raise ValueError("failure detection needs a strict-mode trace")
    return trace.failure_step


def stack_probe(
    scene: Scene,
    oid: str,
    orientation: Quat | None = None,
    jitter: tuple[float, float] = (0.0, 0.0),
) -> TrajectoryTrace:
    """Stack one object on a unit cube at the agent and record its trajectory.

    The probe cube stands in for the agent's own body, so the interaction
    replicates the two-object stacking task the grounding model is built on.
    The input scene is never mutated; the caller's world is untouched.
    """
    obj = scene[oid]
    if not obj.movable:
        raise Immovable(oid)

    ax, _, az = scene.agent.position
    cube = SceneObject(
        id=PROBE_CUBE_ID,
        shape="cube",
        dimensions=(1.0, 1.0, 1.0),
        position=(float(ax), 0.5, float(az)),
        movable=False,
        color="white",
    )
    probe_scene = scene.without_object(oid).with_object(cube)
    # Nudge the probe cube +X until it does not collide with the scene.
    while any(
        cube.aabb().penetration(o.aabb()) > CONTACT_TOL
        for o in probe_scene.objects
        if o.id != cube.id
    ):
        cube = replace(cube, position=(cube.position[0] + 0.5, 0.5, cube.position[2]))
        probe_scene = probe_scene.with_object(cube)

    rot = orientation if orientation is not None else obj.rotation
    half_y = float(geometry.world_half_extents(rot, obj.dimensions)[1])
    target = (
        cube.position[0] + jitter[0],
        cube.aabb().top + half_y,
        cube.position[2] + jitter[1],
    )
    staged = probe_scene.with_object(replace(obj, position=target, rotation=rot))
    settled, traces, displaced = settle(staged)

    context = f"stack_probe:{oid}"
    for trace in traces:
        if trace.object_id == oid:
            return replace(trace, action_context=context)
    return TrajectoryTrace(
        object_id=oid,
        samples=((0, target, rot), (1, target, rot)),
        action_context=context,
        end_contact=contact_class(settled, oid),
        ended_on_ground=settled[oid].aabb().bottom <= CONTACT_TOL,
    )


def featurize(trace: TrajectoryTrace) -> np.ndarray:
    """Fixed-order raw feature vector of a trajectory (see FEATURE_NAMES)."""
    if len(trace.samples) < 2:
        raise DegenerateTrace(trace.object_id)
    _, p0, r0 = trace.samples[0]
    _, p1, r1 = trace.samples[-1]
    drop = p0[1] - p1[1]
    drift = math.hypot(p1[0] - p0[0], p1[2] - p0[2])
    tilt = max(geometry.tilt_between(r0, r) for _, _, r in trace.samples)
    on_ground = 1.0 if trace.ended_on_ground else 0.0
    onehot = {
        "flat": (1.0, 0.0, 0.0),
        "round": (0.0, 1.0, 0.0),
        "point": (0.0, 0.0, 1.0),
    }.get(trace.end_contact, (0.0, 0.0, 0.0))
    return np.array(
        [drop, drift, tilt, on_ground, *onehot, float(len(trace.samples))], dtype=float
    )


# ---------------------------------------------------------------------------
# Grounding model

@dataclass(frozen=True)
class BehaviorEmbedding:
    vector: tuple[float, ...]
    source: tuple[str, str, str]  # (shape, orientation-at-probe, trace id)
    label: str | None = None

    def __post_init__(self):
        norm = math.sqrt(sum(v * v for v in self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("behavior embeddings must be unit-normalized")


@dataclass(frozen=True)
class ProbeSample:
    features: np.ndarray
    label: str
    source: tuple[str, str, str]


@dataclass(frozen=True)
class GroundingModel:
    transform: np.ndarray       # (embed_dim, feature_dim)
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    references: tuple[BehaviorEmbedding, ...]
    k: int = 5
    seed: int = 0

    def training_shapes(self) -> set[str]:
        return {ref.source[0] for ref in self.references}

    def embed(self, features: np.ndarray, source=("", "", "")) -> BehaviorEmbedding:
        z = (np.asarray(features, dtype=float) - self.feature_mean) / self.feature_scale
        v = self.transform @ z
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            v = np.zeros_like(v)
            v[0] = 1.0
        else:
            v = v / norm
        return BehaviorEmbedding(vector=tuple(float(c) for c in v), source=tuple(source))


def _upright_for(habitat) -> Quat:
    return geometry.quat_aligning(habitat.up_axis, (0.0, 1.0, 0.0))


def _probe_scene_for(shape: str, kb: VoxKB) -> Scene:
    obj = SceneObject(id="sample", shape=shape, dimensions=(1.0, 1.0, 1.0),
                      position=(4.0, 0.5, 0.0))
    return Scene(objects=(obj,), agent=Agent(position=(0.0, 0.0, 0.0)), kb=kb)


def build_training_probes(
    kb: VoxKB | None = None,
    seed: int = 0,
    samples_per_habitat: int = PROBE_SAMPLES_PER_HABITAT,
) -> list[ProbeSample]:
    """Probe every pure flat/round shape in each of its habitats.

    Mixed-class shapes are deliberately excluded: grounding them later is the
    whole point.  Pose jitter (1 cm) varies the samples within a class.
    """
    kb = kb or load_default_kb()
    rng = np.random.default_rng(int(seed))
    samples = []
    shapes = kb.shapes_of_class(FLAT) + kb.shapes_of_class(ROUND)
    for shape in shapes:
        if shape == "platform":
            continue
        vox = kb.lookup(shape)
        scene = _probe_scene_for(shape, kb)
        for hab_idx, habitat in enumerate(vox.habitats):
            orientation = _upright_for(habitat)
            for i in range(samples_per_habitat):
                jitter = tuple(rng.uniform(-PROBE_JITTER, PROBE_JITTER, size=2))
                trace = stack_probe(scene, "sample", orientation=orientation, jitter=jitter)
                samples.append(
                    ProbeSample(
                        features=featurize(trace),
                        label=vox.intrinsic_class,
                        source=(shape, f"habitat{hab_idx}", f"{shape}-h{hab_idx}-{i}"),
                    )
                )
    return samples


def train_similarity(
    samples: list[ProbeSample],
    seed: int = 0,
    k: int = 5,
    kb: VoxKB | None = None,
    embed_dim: int = 4,
    iterations: int = 300,
    lr: float = 0.05,
    margin: float = 2.0,
) -> GroundingModel:
    """Learn the linear metric separating flat from round behavior.

    Full-batch gradient descent on a pairwise contrastive objective: same
    label pulls squared distance down, different labels push distance past the
    margin.  Deterministic given the seed.
    """
    kb = kb or load_default_kb()
    for s in samples:
        if s.source[0] in kb and kb.lookup(s.source[0]).intrinsic_class == "mixed":
            raise ValueError(f"mixed-class shape {s.source[0]!r} is not trainable")
    labels = sorted({s.label for s in samples})
    if len(labels) < 2:
        raise InsufficientData("need samples of at least two labels")
    for label in labels:
        if sum(1 for s in samples if s.label == label) < 2:
            raise InsufficientData(f"need at least 2 samples for label {label!r}")

    X = np.stack([s.features for s in samples])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-9] = 1.0
    Z = (X - mean) / scale

    n = len(samples)
    y = np.array([labels.index(s.label) for s in samples])
    same = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    diff = y[:, None] != y[None, :]
    pair_count = max(int(same.sum() + diff.sum()), 1)

    rng = np.random.default_rng(int(seed))
    A = rng.normal(0.0, 0.1, size=(embed_dim, Z.shape[1]))

    for _ in range(iterations):
        E = Z @ A.T
        D = E[:, None, :] - E[None, :, :]
        dist = np.sqrt((D ** 2).sum(axis=2) + 1e-12)
        hinge = np.maximum(margin - dist, 0.0)
        # dL/dE_i accumulated over both pair roles.
        coeff = 2.0 * same.astype(float) - 2.0 * diff * hinge / dist
        grad_E = (coeff[:, :, None] * D).sum(axis=1)
        grad_A = grad_E.T @ Z / pair_count
        A = A - lr * grad_A

    model = GroundingModel(
        transform=A,
        feature_mean=mean,
        feature_scale=scale,
        references=(),
        k=k,
        seed=int(seed),
    )
    refs = tuple(
        replace(model.embed(s.features, source=s.source), label=s.label) for s in samples
    )
    return replace(model, references=refs)


def ground(model: GroundingModel, embedding: BehaviorEmbedding):
    """Majority label of the k nearest references by cosine similarity."""
    v = np.asarray(embedding.vector)
    sims = [
        (float(np.dot(v, np.asarray(ref.vector))), -i, ref)
        for i, ref in enumerate(model.references)
    ]
    sims.sort(reverse=True)
    neighbors = [ref for _, _, ref in sims[: model.k]]
    votes = {}
    for ref in neighbors:
        votes[ref.label] = votes.get(ref.label, 0) + 1
    label = max(sorted(votes), key=lambda lab: votes[lab])
    return label, neighbors


def determine_habitat(scene: Scene, oid: str, model: GroundingModel) -> Quat:
    """Orientation under which the object's probe behavior grounds flat.

    Iterates the voxeme's habitats in declaration order, probing each; raises
    NoFlatHabitat when every orientation grounds round.
    """
    obj = scene[oid]
    if not obj.movable:
        raise Immovable(oid)
    vox = scene.kb.lookup(obj.shape)
    for hab_idx, habitat in enumerate(vox.habitats):
        orientation = _upright_for(habitat)
        trace = stack_probe(scene, oid, orientation=orientation)
        emb = model.embed(featurize(trace), source=(obj.shape, f"habitat{hab_idx}", trace.action_context))
        label, _ = ground(model, emb)
        if label == FLAT_LABEL:
            return orientation
    raise NoFlatHabitat(oid)


# ---------------------------------------------------------------------------
# Staircase synthesis

@dataclass(frozen=True)
class GroundingDecision:
    object_id: str
    shape: str
    label: str
    habitat_index: int | None
    orientation: Quat | None
    neighbor_sources: tuple[tuple[str, str, str], ...]


def _grounding_survey(scene: Scene, oid: str, model: GroundingModel):
    """Like determine_habitat but returns the per-probe decision record."""
    obj = scene[oid]
    vox = scene.kb.lookup(obj.shape)
    last_neighbors: tuple = ()
    for hab_idx, habitat in enumerate(vox.habitats):
        orientation = _upright_for(habitat)
        trace = stack_probe(scene, oid, orientation=orientation)
        emb = model.embed(featurize(trace), source=(obj.shape, f"habitat{hab_idx}", trace.action_context))
        label, neighbors = ground(model, emb)
        last_neighbors = tuple(n.source for n in neighbors)
        if label == FLAT_LABEL:
            return GroundingDecision(
                object_id=oid, shape=obj.shape, label=FLAT_LABEL,
                habitat_index=hab_idx, orientation=orientation,
                neighbor_sources=last_neighbors,
            )
    return GroundingDecision(
        object_id=oid, shape=obj.shape, label=ROUND_LABEL,
        habitat_index=None, orientation=None, neighbor_sources=last_neighbors,
    )


def _target_platform(scene: Scene, target_height: float) -> SceneObject | None:
    fixed = [
        o for o in scene.objects
        if not o.movable
        and scene.habitat_of(o).support_surface == FLAT
        and o.aabb().top >= target_height - CONTACT_TOL
    ]
    if not fixed:
        return None
    a = np.asarray(scene.agent.position)
    return min(fixed, key=lambda o: (float(np.linalg.norm(np.asarray(o.position) - a)), o.id))


def _affords_stack_target(scene: Scene, obj: SceneObject, orientation: Quat) -> bool:
    vox = scene.kb.lookup(obj.shape)
    habitat = scene.kb.active_habitat(vox, orientation)
    return STACK_TARGET in habitat.afforded


_LANE_OFFSETS = (0.0, -0.75, 0.75, -1.4, 1.4, -2.0, 2.0)


def _placement_sequence(scene, columns, xs, z):
    """Ordered placements (oid, pos, rot): column bases first, then the
    stacked levels bottom-up.  Mirrors the emitted plan exactly."""
    seq = []
    tops: dict[str, float] = {}
    for (ids, rots), x in zip(columns, xs):
        obj = scene[ids[0]]
        half_y = float(geometry.world_half_extents(rots[0], obj.dimensions)[1])
        seq.append((ids[0], (x, half_y, z), rots[0]))
        tops[ids[0]] = 2.0 * half_y
    for (ids, rots), x in zip(columns, xs):
        below_top = tops[ids[0]]
        for oid, rot in zip(ids[1:], rots[1:]):
            obj = scene[oid]
            half_y = float(geometry.world_half_extents(rot, obj.dimensions)[1])
            seq.append((oid, (x, below_top + half_y, z), rot))
            below_top = below_top + 2.0 * half_y
    return seq


def _column_layout(scene, platform, columns, spacing=1.0):
    """Pick a z lane where the emitted placement sequence is collision-free."""
    face_x = platform.aabb().lo[0]
    n = len(columns)
    xs = [face_x - (n - k + 0.5) * spacing for k in range(n, 0, -1)]
    for dz in _LANE_OFFSETS:
        z = platform.position[2] + dz
        scratch = scene
        ok = True
        for oid, pos, rot in _placement_sequence(scene, columns, xs, z):
            obj = scratch[oid]
            probe = geometry.AABB(pos, geometry.world_half_extents(rot, obj.dimensions))
            if any(
                probe.penetration(o.aabb()) > CONTACT_TOL
                for o in scratch.objects
                if o.id != oid
            ):
                ok = False
                break
            scratch = scratch.with_object(replace(obj, position=pos, rotation=rot))
        if ok:
            return xs, z
    raise Unsolvable("no collision-free lane for the staircase")


def synthesize_staircase(
    scene: Scene,
    target_height: float,
    jump: float,
    model: GroundingModel,
) -> tuple[Plan, list[GroundingDecision]]:
    """Build a staircase plan from flat-groundable objects.

    Objects are surveyed nearest-first from the agent; each column k of the
    staircase stacks k objects, columns run along +X toward the platform face
    with one-footprint spacing.  Raises Unsolvable when the scene lacks enough
    flat-groundable objects (or stackable column bases).
    """
    n_steps = max(1, math.ceil(target_height / jump - 1e-9))
    needed = n_steps * (n_steps + 1) // 2

    a = np.asarray(scene.agent.position)
    order = sorted(
        scene.movables(),
        key=lambda o: (float(np.linalg.norm(np.asarray(o.position) - a)), o.id),
    )
    decisions: list[GroundingDecision] = []
    flat_objs: list[tuple[str, Quat]] = []
    for obj in order:
        decision = _grounding_survey(scene, obj.id, model)
        decisions.append(decision)
        if decision.label == FLAT_LABEL:
            flat_objs.append((obj.id, decision.orientation))
        if len(flat_objs) >= needed:
            break
    if len(flat_objs) < needed:
        raise Unsolvable(
            f"need {needed} flat-groundable objects, found {len(flat_objs)}"
        )

    # Column bases that carry further objects must afford being stacked on.
    stackable_bases = [
        (oid, rot) for oid, rot in flat_objs
        if _affords_stack_target(scene, scene[oid], rot)
    ]
    base_need = n_steps - 1  # columns of height >= 2, one base slot each
    tall_bases = []
    rest = list(flat_objs)
    for col_height in range(n_steps, 1, -1):
        for _ in range(col_height - 1):
            pick = next(((o, r) for o, r in rest if (o, r) in stackable_bases), None)
            if pick is None:
                raise Unsolvable("no stack-supporting object left for a column base")
            tall_bases.append(pick)
            rest.remove(pick)

    # Assemble columns tallest-first (adjacent to the platform face).
    columns: list[tuple[list[str], list[Quat]]] = []
    base_iter = iter(tall_bases)
    for col_height in range(n_steps, 0, -1):
        ids, rots = [], []
        for level in range(col_height - 1):
            oid, rot = next(base_iter)
            ids.append(oid)
            rots.append(rot)
        top_oid, top_rot = rest.pop(0)
        ids.append(top_oid)
        rots.append(top_rot)
        columns.append((ids, rots))

    platform = _target_platform(scene, target_height)
    if platform is None:
        raise Unsolvable("no fixed surface at the target height")
    xs, z = _column_layout(scene, platform, columns)

    # Emit placements in the validated order: every column base first
    # (tallest column nearest the platform), then the stacked levels.
    sequence = _placement_sequence(scene, columns, xs, z)
    below: dict[str, str] = {}
    for ids, _ in columns:
        for lower, upper in zip(ids, ids[1:]):
            below[upper] = lower

    used_shapes: dict[str, int] = {}

    def ref_for(oid: str) -> ObjectRef:
        shape = scene[oid].shape
        seen = used_shapes.get(shape, 0)
        used_shapes[shape] = seen + 1
        return ObjectRef(shape=shape, distinct=seen > 0, bound_ids=(oid,))

    steps = []
    for oid, pos, rot in sequence:
        obj = scene[oid]
        if oid in below:
            steps.append(
                PlaceOn(
                    obj=ref_for(oid),
                    base=ObjectRef(shape=scene[below[oid]].shape, bound_ids=(below[oid],)),
                    orientation=_orientation_tag(obj, rot),
                    target_position=pos,
                    target_rotation=rot,
                )
            )
        else:
            steps.append(
                PlaceAt(
                    obj=ref_for(oid), relation="at_point", point=(pos[0], pos[2]),
                    orientation=_orientation_tag(obj, rot),
                    target_position=pos, target_rotation=rot,
                )
            )

    return Plan(steps=tuple(steps)), decisions


def _orientation_tag(obj: SceneObject, rot: Quat) -> str | None:
    """Orientation tag for rendering: mark re-orientations as upright."""
    if tuple(rot) != tuple(obj.rotation):
        return "upright"
    return None


# ---------------------------------------------------------------------------
# End-to-end loop

@dataclass(frozen=True)
class ExplorationResult:
    triggered: bool
    failure_step: int | None
    plan: Plan | None
    decisions: tuple[GroundingDecision, ...]
    model: GroundingModel | None
    trace: ExecutionTrace | None = None


def explore_after_failure(
    scene: Scene,
    failed_trace: ExecutionTrace,
    model: GroundingModel | None = None,
    seed: int = 0,
    target_height: float = 2.0,
    jump: float | None = None,
) -> ExplorationResult:
    """Run the probe -> ground -> habitat -> staircase loop after a failure.

    The exploration continues from the post-failure world state; the
    synthesized plan is executed there and its trace is attached.
    """
    trigger = detect_failure(failed_trace)
    if trigger is None:
        return ExplorationResult(
            triggered=False, failure_step=None, plan=None, decisions=(), model=model
        )
    if model is None:
        model = train_similarity(
            build_training_probes(kb=scene.kb, seed=seed), seed=seed, kb=scene.kb
        )
    world = failed_trace.final_scene
    jump = jump if jump is not None else scene.agent.jump_height
    plan, decisions = synthesize_staircase(world, target_height, jump, model)
    trace = operationalize(plan, world, mode="permissive")
    return ExplorationResult(
        triggered=True,
        failure_step=trigger,
        plan=plan,
        decisions=tuple(decisions),
        model=model,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Model persistence (versioned, binary-safe text)

def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(node: dict) -> np.ndarray:
    raw = base64.b64decode(node["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(node["shape"]).copy()


def save_model(model: GroundingModel, path: str | Path) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "k": model.k,
        "seed": model.seed,
        "transform": _encode_array(model.transform),
        "feature_mean": _encode_array(model.feature_mean),
        "feature_scale": _encode_array(model.feature_scale),
        "references": [
            {
                "vector": _encode_array(np.asarray(ref.vector)),
                "source": list(ref.source),
                "label": ref.label,
            }
            for ref in model.references
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> GroundingModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format: {doc.get('format_version')}")
    refs = tuple(
        BehaviorEmbedding(
            vector=tuple(float(v) for v in _decode_array(r["vector"])),
            source=tuple(r["source"]),
            label=r["label"],
        )
        for r in doc["references"]
    )
    return GroundingModel(
        transform=_decode_array(doc["transform"]),
        feature_mean=_decode_array(doc["feature_mean"]),
        feature_scale=_decode_array(doc["feature_scale"]),
        references=refs,
        k=int(doc["k"]),
        seed=int(doc["seed"]),
    )
