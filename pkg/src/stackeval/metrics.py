"""Scoring: configuration stability, object-selection IoU, report assembly."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from stackeval.planlang import ExecutionTrace, Plan
from stackeval.scenarios import ReferenceSet
from stackeval.simcore import Scene

DEFAULT_TOLERANCE = 0.1  # m; settling jitter vs. an actual fall


@dataclass(frozen=True)
class EvalReport:
    stability: float
    iou: float
    failure_step: int | None = None
    per_object_displacement: dict[str, float] = field(default_factory=dict)
    mode: str = "permissive"
    reference_used: str | None = None

    def to_dict(self) -> dict:
        return {
            "stability": self.stability,
            "iou": self.iou,
            "failure_step": self.failure_step,
            "per_object_displacement": dict(sorted(self.per_object_displacement.items())),
            "mode": self.mode,
            "reference_used": self.reference_used,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            stability=float(d["stability"]),
            iou=float(d["iou"]),
            failure_step=d.get("failure_step"),
            per_object_displacement=dict(d.get("per_object_displacement", {})),
            mode=d.get("mode", "permissive"),
            reference_used=d.get("reference_used"),
        )


def displacement(before: Scene, after: Scene, oid: str) -> float:
    p0 = before[oid].position
    p1 = after[oid].position
    return math.dist(p0, p1)


def stability(before: Scene, after: Scene, placed, tolerance: float = DEFAULT_TOLERANCE) -> float:
    """Fraction of placed objects whose center moved at most ``tolerance``.

    Vacuously 1.0 for an empty placed set.
    """
    placed = sorted(set(placed))
    if not placed:
        return 1.0
    stable = sum(1 for oid in placed if displacement(before, after, oid) <= tolerance)
    return stable / len(placed)


def _as_shape_counts(ref) -> tuple[str | None, Counter]:
    if isinstance(ref, ReferenceSet):
        return ref.name, Counter(ref.shapes)
    return None, Counter(ref)


def iou(selected, references) -> tuple[float, str | None]:
    """Best intersection-over-union of the selected shape multiset.

    ``selected`` maps object id -> shape (or is an iterable of (id, shape)
    pairs); instances are matched to reference slots greedily by shape, which
    for multisets is exactly per-shape min/max counting.  Returns the best
    fraction and the name (or index) of the reference that achieved it.
    """
    references = list(references)
    if not references:
        raise ValueError("at least one reference set is required")
    if hasattr(selected, "items"):
        pairs = selected.items()
    else:
        pairs = list(selected)
    counts = Counter(shape for _, shape in pairs)

    best, best_name = -1.0, None
    for idx, ref in enumerate(references):
        name, ref_counts = _as_shape_counts(ref)
        shapes = set(counts) | set(ref_counts)
        inter = sum(min(counts[s], ref_counts[s]) for s in shapes)
        union = sum(max(counts[s], ref_counts[s]) for s in shapes)
        value = inter / union if union else 1.0
        if value > best:
            best, best_name = value, name if name is not None else str(idx)
    return best, best_name


def report(
    trace: ExecutionTrace,
    plan: Plan,
    references,
    tolerance: float = DEFAULT_TOLERANCE,
) -> EvalReport:
    """Assemble the two scores for one executed plan.

    Stability counts only plan-placed objects (those a step actually moved);
    displacement is measured between each object's intended pose and its pose
    in the final settled scene.
    """
    final = trace.final_scene
    intended = trace.placed_poses()
    per_obj = {
        oid: math.dist(pose[0], final[oid].position) for oid, pose in intended.items()
    }
    placed = sorted(per_obj)
    if placed:
        moved = sum(1 for oid in placed if per_obj[oid] > tolerance)
        stab = 1.0 - moved / len(placed)
    else:
        stab = 1.0

    selected = {oid: final[oid].shape for oid in plan.selected_objects()}
    value, ref_name = iou(selected, references)

    return EvalReport(
        stability=stab,
        iou=value,
        failure_step=trace.failure_step,
        per_object_displacement=per_obj,
        mode=trace.mode,
        reference_used=ref_name,
    )
