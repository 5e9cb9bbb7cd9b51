"""Scenario spec files: schema, loading, and the registry of shipped scenes.

A scenario file is a YAML document listing interactables, platforms, the
agent, prompt texts per variant, and the reference object sets used by the
IoU metric.  Shipped files live in the repository's ``scenarios/`` directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from stackeval import geometry
from stackeval.geometry import IDENTITY
from stackeval.simcore import Agent, Scene, SceneObject, spawn
from stackeval.voxkb import VoxKB, load_default_kb, load_kb


class UnknownScenario(KeyError):
    """Scenario id is not registered and no file of that name exists."""


@dataclass(frozen=True)
class ReferenceSet:
    name: str
    shapes: tuple[str, ...]


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    objects: tuple[SceneObject, ...]
    agent: Agent
    prompts: dict[str, str]
    references: tuple[ReferenceSet, ...] = ()
    target_platform: str | None = None
    target_height: float = 2.0
    metadata: dict = field(default_factory=dict)
    kb: VoxKB | None = None

    def scene(self) -> Scene:
        return spawn(self)


def _parse_rotation(node) -> tuple[float, float, float, float]:
    if node is None:
        return IDENTITY
    if "quat" in node:
        return tuple(float(c) for c in node["quat"])
    return geometry.quat_from_axis_angle(tuple(node["axis"]), float(node["degrees"]))


def _parse_object(node: dict, movable: bool, default_color: str) -> SceneObject:
    return SceneObject(
        id=node["id"],
        shape=node.get("shape", "platform" if not movable else "cube"),
        dimensions=tuple(float(d) for d in node.get("dims", (1.0, 1.0, 1.0))),
        position=tuple(float(c) for c in node["position"]),
        rotation=_parse_rotation(node.get("rotation")),
        movable=node.get("movable", movable),
        color=node.get("color", default_color),
    )


def load_scenario(path: str | Path, kb: VoxKB | None = None) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    objects = [_parse_object(n, True, "blue") for n in doc.get("objects", [])]
    objects += [_parse_object(n, False, "gray") for n in doc.get("platforms", [])]
    agent_node = doc.get("agent", {})
    agent = Agent(
        position=tuple(float(c) for c in agent_node.get("position", (0.0, 0.0, 0.0))),
        jump_height=float(agent_node.get("jump_height", 1.0)),
    )
    refs = tuple(
        ReferenceSet(name=r["name"], shapes=tuple(r["shapes"]))
        for r in doc.get("references", [])
    )
    return ScenarioSpec(
        id=doc["id"],
        objects=tuple(objects),
        agent=agent,
        prompts=dict(doc.get("prompts", {})),
        references=refs,
        target_platform=doc.get("target_platform"),
        target_height=float(doc.get("target_height", 2.0)),
        metadata=dict(doc.get("metadata", {})),
        kb=kb or load_default_kb(),
    )


def scenario_dir() -> Path:
    """Directory holding the shipped scenario files.

    Resolution order: $STACKEVAL_SCENARIO_DIR, ./scenarios relative to the
    working directory, then the repository checkout next to this package.
    """
    env = os.environ.get("STACKEVAL_SCENARIO_DIR")
    if env:
        return Path(env)
    cwd = Path.cwd() / "scenarios"
    if cwd.is_dir():
        return cwd
    return Path(__file__).resolve().parents[2] / "scenarios"


def resolve_scenario(scenario: str, kb: VoxKB | None = None) -> ScenarioSpec:
    """Load a scenario by id (registry lookup) or by explicit file path."""
    p = Path(scenario)
    if p.suffix in (".yaml", ".yml") and p.is_file():
        return load_scenario(p, kb=kb)
    candidate = scenario_dir() / f"{scenario}.yaml"
    if candidate.is_file():
        return load_scenario(candidate, kb=kb)
    raise UnknownScenario(scenario)


def list_scenarios() -> list[str]:
    d = scenario_dir()
    if not d.is_dir():
        return []
    return sorted(p.stem for p in d.glob("*.yaml"))
