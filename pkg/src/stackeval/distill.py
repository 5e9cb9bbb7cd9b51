"""Distillation-loss numerics and simulation-sourced preference labeling.

Plain dense double-precision arithmetic throughout — no ML framework — so
the analytic gradients can be checked against finite differences exactly.
The attention loss sums squared Euclidean distances between corresponding
attention rows of a language-model stack and an object-model stack; the
embedding loss measures the distance between an object token embedding and
the projected object-classifier state; the combined loss is their weighted
sum with a pairwise margin term over simulation-labeled preference pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from stackeval.metrics import EvalReport, report
from stackeval.planlang import UnknownObject, operationalize, parse, resolve
from stackeval.scenarios import ScenarioSpec, resolve_scenario

_ROW_SUM_TOL = 1e-6


class ShapeMismatch(ValueError):
    """Tensor shapes are inconsistent."""


class EmptyGrid(ValueError):
    """Hyperparameter grid has no points."""


# ---------------------------------------------------------------------------
# Attention stacks

@dataclass(frozen=True)
class AttentionStack:
    """Per-head row-stochastic attention matrices plus the object-token rows.

    ``object_rows`` is the explicit alignment map: the query rows (shared
    across heads) that denote objects and are compared across models.
    """

    heads: np.ndarray  # (h, queries, positions)
    source: str = "language"
    object_rows: tuple[int, ...] = ()

    def __post_init__(self):
        heads = np.asarray(self.heads, dtype=float)
        if heads.ndim != 3:
            raise ShapeMismatch("attention stacks are (heads, queries, positions)")
        if (heads < -1e-12).any():
            raise ValueError("attention entries must be non-negative")
        sums = heads.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=_ROW_SUM_TOL):
            raise ValueError("attention rows must sum to 1")
        object.__setattr__(self, "heads", heads)


def _aligned_rows(lang: AttentionStack, obj: AttentionStack):
    if lang.heads.shape[0] != obj.heads.shape[0]:
        raise ShapeMismatch("head counts differ")
    if lang.heads.shape[2] != obj.heads.shape[2]:
        raise ShapeMismatch("attended position counts differ")
    rows_l = lang.object_rows or tuple(range(lang.heads.shape[1]))
    rows_o = obj.object_rows or tuple(range(obj.heads.shape[1]))
    if len(rows_l) != len(rows_o):
        raise ShapeMismatch("alignment maps have different lengths")
    return rows_l, rows_o


def attention_loss(lang: AttentionStack, obj: AttentionStack) -> float:
    """Sum over heads of squared distances between aligned object-token rows."""
    rows_l, rows_o = _aligned_rows(lang, obj)
    diff = lang.heads[:, rows_l, :] - obj.heads[:, rows_o, :]
    return float((diff ** 2).sum())


def attention_loss_grad(lang: AttentionStack, obj: AttentionStack):
    """Analytic gradients of attention_loss w.r.t. both stacks' entries."""
    rows_l, rows_o = _aligned_rows(lang, obj)
    diff = lang.heads[:, rows_l, :] - obj.heads[:, rows_o, :]
    grad_l = np.zeros_like(lang.heads)
    grad_o = np.zeros_like(obj.heads)
    grad_l[:, rows_l, :] = 2.0 * diff
    grad_o[:, rows_o, :] = -2.0 * diff
    return grad_l, grad_o


# ---------------------------------------------------------------------------
# Embedding loss and projection fit

def embedding_loss(obj_lang: np.ndarray, obj_vis: np.ndarray, projection: np.ndarray) -> float:
    """Squared distance between the language embedding and the projected one."""
    obj_lang = np.asarray(obj_lang, dtype=float)
    obj_vis = np.asarray(obj_vis, dtype=float)
    projection = np.asarray(projection, dtype=float)
    if projection.ndim != 2 or obj_vis.shape[-1] != projection.shape[0] \
            or obj_lang.shape[-1] != projection.shape[1]:
        raise ShapeMismatch(
            f"projection {projection.shape} does not map {obj_vis.shape} -> {obj_lang.shape}"
        )
    resid = obj_lang - obj_vis @ projection
    return float((resid ** 2).sum())


def embedding_loss_grad(obj_lang, obj_vis, projection):
    """Analytic gradients of embedding_loss w.r.t. (obj_lang, obj_vis, W)."""
    obj_lang = np.asarray(obj_lang, dtype=float)
    obj_vis = np.asarray(obj_vis, dtype=float)
    projection = np.asarray(projection, dtype=float)
    resid = obj_lang - obj_vis @ projection
    grad_lang = 2.0 * resid
    grad_vis = -2.0 * resid @ projection.T
    grad_w = -2.0 * np.outer(obj_vis, resid)
    return grad_lang, grad_vis, grad_w


def fit_projection(pairs, max_iters: int = 200_000, tol: float = 1e-12, seed: int = 0) -> np.ndarray:
    """Least-squares fit of the cross-space projection by gradient descent.

    Starts from W = 0, which keeps the iterates in the row space of the
    inputs, so rank-deficient systems converge to the minimum-norm solution
    (with a warning).  The gradient is the normal-equation residual, so the
    stopping tolerance directly bounds that residual.  The descent path is
    fully deterministic; ``seed`` is accepted for interface uniformity.
    """
    del seed
    xv = np.stack([np.asarray(v, dtype=float) for v, _ in pairs])
    xl = np.stack([np.asarray(l, dtype=float) for _, l in pairs])
    if xv.ndim != 2 or xl.ndim != 2 or len(xv) != len(xl):
        raise ShapeMismatch("pairs must be equal-length lists of (visual, language) vectors")
    n, v_dim = xv.shape

    if np.linalg.matrix_rank(xv) < v_dim:
        warnings.warn(
            "rank-deficient projection fit: returning the minimum-norm solution",
            RuntimeWarning,
            stacklevel=2,
        )

    gram = xv.T @ xv / n
    cross = xv.T @ xl / n
    lip = float(np.linalg.eigvalsh(gram).max())
    if lip <= 0.0:
        return np.zeros((v_dim, xl.shape[1]))
    step = 1.0 / (2.0 * lip)

    w = np.zeros((v_dim, xl.shape[1]))
    scale = max(float(np.abs(cross).max()), 1.0)
    for _ in range(max_iters):
        grad = 2.0 * (gram @ w - cross)
        if np.abs(grad).max() <= tol * scale:
            break
        w = w - step * grad
    return w


# ---------------------------------------------------------------------------
# Preference pairs and the contrastive term

@dataclass(frozen=True)
class ScoredResponse:
    text: str
    report: EvalReport
    violation: str | None = None  # CollisionAtTarget / UnknownObject / unstable


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: str
    good: ScoredResponse
    bad: ScoredResponse

    def __post_init__(self):
        if not _is_good(self.good):
            raise ValueError("good response must be stable and violation-free")
        if _is_good(self.bad):
            raise ValueError("bad response must violate stability or satisfiability")


def _is_good(scored: ScoredResponse) -> bool:
    return scored.violation is None and scored.report.stability == 1.0


def score_response(text: str, scenario: ScenarioSpec, seed: int = 0,
                   mode: str = "permissive") -> ScoredResponse:
    """Run one response through parse -> resolve -> operationalize -> report."""
    scene = scenario.scene()
    plan = parse(text)
    try:
        grounded = resolve(plan, scene, seed=seed)
    except UnknownObject as exc:
        vacuous = EvalReport(stability=1.0, iou=0.0, mode=mode,
                             reference_used=None)
        return ScoredResponse(text=text, report=vacuous,
                              violation=f"UnknownObject: {exc}")
    trace = operationalize(grounded, scene, mode=mode)
    rep = report(trace, grounded, scenario.references)
    violation = None
    if trace.failure_step is not None:
        violation = trace.outcomes[trace.failure_step].reason or "failed step"
    elif rep.stability < 1.0:
        violation = "unstable configuration"
    return ScoredResponse(text=text, report=rep, violation=violation)


def label_preference(prompt_id: str, responses, seed: int = 0) -> list[PreferencePair]:
    """Label responses good/bad by simulation outcome and pair them up.

    Good responses operationalize to a fully stable configuration with no
    collision or unresolvable reference; everything else is bad.  Returns the
    cross product of good and bad responses (empty when either side is).
    """
    scenario = resolve_scenario(prompt_id)
    scored = [score_response(text, scenario, seed=seed) for text in responses]
    good = [s for s in scored if _is_good(s)]
    bad = [s for s in scored if not _is_good(s)]
    return [
        PreferencePair(prompt_id=prompt_id, good=g, bad=b) for g in good for b in bad
    ]


def contrastive_loss(pairs, scorer, margin: float = 1.0) -> float:
    """Pairwise margin ranking: sum of max(0, margin - good + bad) scores."""
    total = 0.0
    for pair in pairs:
        total += max(0.0, margin - scorer(pair.good) + scorer(pair.bad))
    return float(total)


def combined_loss(lambdas, l_cont: float, l_att: float, l_emb: float) -> float:
    l1, l2, l3 = (float(x) for x in lambdas)
    if min(l1, l2, l3) < 0.0:
        raise ValueError("loss weights must be non-negative")
    return l1 * l_cont + l2 * l_att + l3 * l_emb


def tune_lambda(validation_losses, grid) -> tuple[float, float, float]:
    """Grid point minimizing the mean combined loss over validation triples.

    ``validation_losses`` is a sequence of (l_cont, l_att, l_emb) triples.
    Ties break toward the lexicographically smallest weight vector.
    """
    grid = [tuple(float(x) for x in g) for g in grid]
    if not grid:
        raise EmptyGrid("empty weight grid")
    triples = [tuple(float(x) for x in t) for t in validation_losses]
    if not triples:
        raise ValueError("empty validation set")

    def mean_loss(lams):
        return sum(combined_loss(lams, *t) for t in triples) / len(triples)

    return min(sorted(grid), key=mean_loss)


# ---------------------------------------------------------------------------
# Flat tensor file (see docs/formats.md)

_TENSOR_MAGIC = "stackeval-tensors v1"


def write_tensor_file(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors: ASCII header (name + dims per line), blank line,
    then the concatenated row-major float64 payloads in header order."""
    header_lines = [_TENSOR_MAGIC]
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        header_lines.append(name + " " + " ".join(str(d) for d in arr.shape))
        payload += arr.tobytes()
    blob = ("\n".join(header_lines) + "\n\n").encode("ascii") + bytes(payload)
    Path(path).write_bytes(blob)


def read_tensor_file(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    sep = blob.index(b"\n\n")
    header = blob[:sep].decode("ascii").splitlines()
    if not header or header[0] != _TENSOR_MAGIC:
        raise ValueError("not a stackeval tensor file")
    tensors: dict[str, np.ndarray] = {}
    offset = sep + 2
    for line in header[1:]:
        parts = line.split()
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        count = int(np.prod(dims)) if dims else 1
        end = offset + 8 * count
        tensors[name] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(dims).copy()
        offset = end
    return tensors


def losses_from_tensor_file(path: str | Path, lambdas=(1.0, 1.0, 1.0),
                            margin: float = 1.0) -> dict[str, float]:
    """Evaluate every loss term present in a tensor file.

    Recognized names: att_lang/att_obj (h,q,p), align_lang/align_obj (r,),
    emb_lang (L,), emb_obj (V,), proj (V,L), score_good (n,), score_bad (n,).
    """
    tensors = read_tensor_file(path)
    out: dict[str, float] = {}
    l_att = l_emb = l_cont = 0.0
    if "att_lang" in tensors and "att_obj" in tensors:
        rows_l = tuple(int(i) for i in tensors.get("align_lang", np.array([])).ravel())
        rows_o = tuple(int(i) for i in tensors.get("align_obj", np.array([])).ravel())
        lang = AttentionStack(heads=tensors["att_lang"], source="language", object_rows=rows_l)
        obj = AttentionStack(heads=tensors["att_obj"], source="object", object_rows=rows_o)
        l_att = attention_loss(lang, obj)
        out["attention_loss"] = l_att
    if "emb_lang" in tensors and "emb_obj" in tensors and "proj" in tensors:
        l_emb = embedding_loss(tensors["emb_lang"], tensors["emb_obj"], tensors["proj"])
        out["embedding_loss"] = l_emb
    if "score_good" in tensors and "score_bad" in tensors:
        good = tensors["score_good"].ravel()
        bad = tensors["score_bad"].ravel()
        if good.shape != bad.shape:
            raise ShapeMismatch("score vectors differ in length")
        l_cont = float(np.maximum(0.0, margin - good + bad).sum())
        out["contrastive_loss"] = l_cont
    out["combined_loss"] = combined_loss(lambdas, l_cont, l_att, l_emb)
    return out
