"""stackeval: deterministic operationalization and scoring of object-stacking plans.

The package turns free-text manipulation plans into grounded action sequences,
executes them in a physics-lite settle engine, scores the result (stability,
object-selection IoU), recovers from plan failure via behavior-grounded
exploration, and provides the distillation-loss numerics used to source
preference signals from the simulation.
"""

__version__ = "0.1.0"

from stackeval.voxkb import VoxKB, load_default_kb
from stackeval.simcore import Scene, SceneObject, settle, spawn
from stackeval.metrics import EvalReport

__all__ = [
    "VoxKB",
    "load_default_kb",
    "Scene",
    "SceneObject",
    "settle",
    "spawn",
    "EvalReport",
    "__version__",
]
