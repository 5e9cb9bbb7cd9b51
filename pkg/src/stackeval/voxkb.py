"""Background knowledge base of object semantics.

Each registered shape carries a voxeme: its symmetry axes, its habitats
(conditioning orientations under which particular surfaces and behaviors are
available), and its intrinsic flat/round/mixed classification.  The KB is a
human-editable YAML tree loaded once at startup and immutable afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from stackeval.geometry import Quat, Vec3, angle_between

FLAT = "flat"
ROUND = "round"
POINT = "point"

ROLL = "roll"
SLIDE = "slide"
STACK_TARGET = "stack_target"
STACKABLE = "stackable"

# Up-axis alignment tolerance: generous enough to absorb settle jitter,
# far below the 90 degrees separating distinct habitats.
UP_TOLERANCE_RAD = math.radians(10.0)


class UnknownShape(KeyError):
    """Raised when a shape name is not registered in the knowledge base."""


@dataclass(frozen=True)
class Habitat:
    """One conditioning orientation of an object.

    ``up_axis`` is the object-local direction that must align with world-up
    (either way when ``bidirectional``).  ``support_surface`` classifies the
    surface the object offers on top in this orientation; ``base_surface``
    classifies the surface it rests on.  ``footprint`` gives half-extents of
    the flat surface per unit of object dimension.
    """

    up_axis: Vec3
    support_surface: str
    base_surface: str
    afforded: frozenset[str]
    footprint: tuple[float, float] | None = None
    footprint_shape: str = "rect"
    bidirectional: bool = False

    def deviation(self, rotation: Quat) -> float:
        """Angular distance of this habitat's up axis from world-up."""
        ang = angle_between(rotation, self.up_axis)
        if self.bidirectional:
            ang = min(ang, math.pi - ang)
        return ang


@dataclass(frozen=True)
class Voxeme:
    name: str
    intrinsic_class: str  # "flat" | "round" | "mixed"
    symmetry_axes: frozenset[str]
    habitats: tuple[Habitat, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.habitats:
            raise ValueError(f"voxeme {self.name!r} declares no habitats")
        if self.intrinsic_class == "mixed":
            classes = {h.support_surface for h in self.habitats}
            if len(classes) < 2:
                raise ValueError(
                    f"mixed-class voxeme {self.name!r} needs habitats of "
                    f"differing support-surface class"
                )


class VoxKB:
    """Immutable registry of voxemes, shareable across threads."""

    def __init__(self, voxemes: dict[str, Voxeme], version: int = 1):
        self.version = version
        self._voxemes = dict(voxemes)

    def lookup(self, name: str) -> Voxeme:
        try:
            return self._voxemes[name]
        except KeyError:
            raise UnknownShape(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._voxemes

    def names(self) -> list[str]:
        return sorted(self._voxemes)

    def shapes_of_class(self, intrinsic_class: str) -> list[str]:
        return sorted(
            n for n, v in self._voxemes.items() if v.intrinsic_class == intrinsic_class
        )

    def active_habitat(self, voxeme: Voxeme, rotation: Quat) -> Habitat:
        """Habitat selected by the current orientation.

        The habitat whose up axis best aligns with world-up within tolerance
        wins; when no habitat is in tolerance a round habitat (if any) acts as
        the fallback, otherwise the nearest habitat is returned so the lookup
        stays total over all orientations.
        """
        scored = [(h.deviation(rotation), i, h) for i, h in enumerate(voxeme.habitats)]
        in_tol = [s for s in scored if s[0] <= UP_TOLERANCE_RAD]
        if in_tol:
            return min(in_tol, key=lambda s: (s[0], s[1]))[2]
        for _, _, h in scored:
            if h.support_surface == ROUND:
                return h
        return min(scored, key=lambda s: (s[0], s[1]))[2]


def _parse_habitat(node: dict) -> Habitat:
    footprint = node.get("footprint")
    return Habitat(
        up_axis=tuple(float(c) for c in node["up"]),
        support_surface=node["surface"],
        base_surface=node.get("base", node["surface"]),
        afforded=frozenset(node.get("afforded", [])),
        footprint=tuple(footprint) if footprint else None,
        footprint_shape=node.get("footprint_shape", "rect"),
        bidirectional=bool(node.get("bidirectional", False)),
    )


def load_kb(path: str | Path) -> VoxKB:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return _kb_from_doc(doc)


def _kb_from_doc(doc: dict) -> VoxKB:
    voxemes = {}
    for name, node in doc["voxemes"].items():
        voxemes[name] = Voxeme(
            name=name,
            intrinsic_class=node["intrinsic"],
            symmetry_axes=frozenset(node.get("symmetry_axes", [])),
            habitats=tuple(_parse_habitat(h) for h in node["habitats"]),
        )
    return VoxKB(voxemes, version=int(doc.get("version", 1)))


def load_default_kb() -> VoxKB:
    """Load the voxeme definitions shipped with the package."""
    ref = resources.files("stackeval").joinpath("data/voxemes.yaml")
    doc = yaml.safe_load(ref.read_text(encoding="utf-8"))
    return _kb_from_doc(doc)
