"""Orchestration: prompts, transcripts, live endpoint client, runs, batches.

Canned runs replay stored transcripts and never touch the network.  Live runs
speak a chat-completions-style HTTP protocol against a configurable base URL
and persist every response before scoring (append-before-evaluate), so a
crash never loses a paid completion.
"""

from __future__ import annotations

import concurrent.futures
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import requests

from stackeval.metrics import DEFAULT_TOLERANCE, EvalReport, report
from stackeval.planlang import UnknownObject, operationalize, parse, resolve
from stackeval.scenarios import ScenarioSpec, UnknownScenario, resolve_scenario
from stackeval import explorer

API_KEY_VAR = "STACKEVAL_API_KEY"

FREE_TEXT = "free_text"
ONE_SENTENCE = "one_sentence"
PARTIAL_SOLUTION = "partial_solution"
VARIANTS = (FREE_TEXT, ONE_SENTENCE, PARTIAL_SOLUTION)

ONE_SENTENCE_INSTRUCTION = "Provide your response in one sentence."
IMAGE_CUE = "You are in the room shown in the image."


class AuthError(RuntimeError):
    """Credentials are missing; raised before any network traffic."""


class NetworkError(RuntimeError):
    """Endpoint unreachable or returned a transport-level failure."""


class MalformedResponse(RuntimeError):
    """Endpoint answered but the completion could not be extracted."""


def build_prompt(variant: str, scenario: str | ScenarioSpec) -> str:
    """Deterministic prompt text for a scenario and prompt variant."""
    spec = resolve_scenario(scenario) if isinstance(scenario, str) else scenario
    if variant not in VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    base = spec.prompts.get("base")
    if base is None:
        raise UnknownScenario(f"scenario {spec.id!r} has no base prompt")
    text = base.strip()
    if spec.metadata.get("image_cue") and not text.startswith(IMAGE_CUE):
        text = f"{IMAGE_CUE} {text}"
    if variant == ONE_SENTENCE:
        return f"{text} {ONE_SENTENCE_INSTRUCTION}"
    if variant == PARTIAL_SOLUTION:
        partial = spec.prompts.get("partial")
        if partial is None:
            raise UnknownScenario(f"scenario {spec.id!r} has no partial-solution prompt")
        return f"{text} {partial.strip()}"
    return text


# ---------------------------------------------------------------------------
# Transcript store (append-only JSON lines)

@dataclass(frozen=True)
class TranscriptRecord:
    model_name: str
    prompt_variant: str
    response_text: str
    prompt_text: str = ""
    timestamp: float = 0.0
    provenance: str = "recorded"  # "quoted" | "reconstructed" | "recorded"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def read_transcript(path: str | Path) -> list[TranscriptRecord]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        d = json.loads(line)
        records.append(
            TranscriptRecord(
                model_name=d["model_name"],
                prompt_variant=d.get("prompt_variant", FREE_TEXT),
                response_text=d["response_text"],
                prompt_text=d.get("prompt_text", ""),
                timestamp=float(d.get("timestamp", 0.0)),
                provenance=d.get("provenance", "recorded"),
            )
        )
    return records


def append_transcript(path: str | Path, record: TranscriptRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()


# ---------------------------------------------------------------------------
# Run configuration

@dataclass(frozen=True)
class LiveSource:
    endpoint: str
    model_name: str
    temperature: float = 0.0


@dataclass(frozen=True)
class CannedSource:
    path: str


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    variant: str = FREE_TEXT
    mode: str = "permissive"
    seed: int = 0
    source: LiveSource | CannedSource = CannedSource(path="")
    tolerance: float = DEFAULT_TOLERANCE
    explore_on_failure: bool = False
    transcript_out: str | None = None  # live responses are appended here


@dataclass(frozen=True)
class RunResult:
    status: str  # "ok" | "skipped"
    model_name: str
    variant: str
    scenario: str
    mode: str
    seed: int
    report: EvalReport | None = None
    reason: str | None = None
    exploration: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "status": self.status,
            "model_name": self.model_name,
            "variant": self.variant,
            "scenario": self.scenario,
            "mode": self.mode,
            "seed": self.seed,
            "reason": self.reason,
            "report": self.report.to_dict() if self.report else None,
        }
        if self.exploration is not None:
            d["exploration"] = self.exploration
        return d


def query_llm(source: LiveSource, prompt: str, api_key: str | None = None,
              timeout: float = 60.0) -> str:
    """One chat completion from a compatible HTTP endpoint.

    The API key comes from the environment unless given explicitly; a missing
    key fails before any network call.
    """
    import os

    key = api_key if api_key is not None else os.environ.get(API_KEY_VAR)
    if not key:
        raise AuthError(f"set {API_KEY_VAR} to use a live endpoint")
    url = source.endpoint.rstrip("/") + "/v1/chat/completions"
    body = {
        "model": source.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": source.temperature,
    }
    try:
        resp = requests.post(
            url, json=body, timeout=timeout,
            headers={"Authorization": f"Bearer {key}"},
        )
        resp.raise_for_status()
        payload = resp.json()
    except (requests.RequestException, ValueError) as exc:
        if isinstance(exc, ValueError):
            raise MalformedResponse(f"endpoint returned non-JSON body: {exc}") from exc
        raise NetworkError(str(exc)) from exc
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"no completion in response: {payload!r}") from exc
    if not isinstance(text, str) or not text.strip():
        raise MalformedResponse("empty completion")
    return text


def score_response(response_text: str, spec: ScenarioSpec, mode: str, seed: int,
                   tolerance: float = DEFAULT_TOLERANCE):
    """parse -> resolve -> operationalize -> report for one response."""
    scene = spec.scene()
    plan = parse(response_text)
    grounded = resolve(plan, scene, seed=seed)
    trace = operationalize(grounded, scene, mode=mode)
    return report(trace, grounded, spec.references, tolerance=tolerance), trace, grounded


def run(config: RunConfig) -> RunResult:
    """Execute one evaluation run: obtain a response, score it, report.

    Module errors (unknown scenario, unresolvable references, endpoint
    failures) become skipped-run records rather than exceptions, so batches
    keep going.
    """
    meta = dict(scenario=config.scenario, mode=config.mode, seed=config.seed,
                variant=config.variant)
    try:
        spec = resolve_scenario(config.scenario)
    except UnknownScenario as exc:
        return RunResult(status="skipped", model_name="", reason=f"UnknownScenario: {exc}", **meta)

    if isinstance(config.source, CannedSource):
        try:
            records = read_transcript(config.source.path)
        except (OSError, json.JSONDecodeError) as exc:
            return RunResult(status="skipped", model_name="", reason=str(exc), **meta)
        matching = [r for r in records if r.prompt_variant == config.variant]
        if not matching:
            return RunResult(status="skipped", model_name="",
                             reason="no matching transcript record", **meta)
        record = matching[0]
        model_name = record.model_name
        response = record.response_text
    else:
        prompt = build_prompt(config.variant, spec)
        model_name = config.source.model_name
        try:
            response = query_llm(config.source, prompt)
        except (AuthError, NetworkError, MalformedResponse) as exc:
            return RunResult(status="skipped", model_name=model_name,
                             reason=f"{type(exc).__name__}: {exc}", **meta)
        if config.transcript_out:
            append_transcript(
                config.transcript_out,
                TranscriptRecord(
                    model_name=model_name, prompt_variant=config.variant,
                    response_text=response, prompt_text=prompt,
                    timestamp=time.time(),
                ),
            )

    try:
        rep, trace, grounded = score_response(
            response, spec, config.mode, config.seed, config.tolerance
        )
    except UnknownObject as exc:
        return RunResult(status="skipped", model_name=model_name,
                         reason=f"UnknownObject: {exc}", **meta)

    exploration = None
    if config.explore_on_failure and config.mode == "strict" and trace.failure_step is not None:
        result = explorer.explore_after_failure(
            spec.scene(), trace, seed=config.seed, target_height=spec.target_height
        )
        if result.triggered:
            from stackeval.planlang import render

            synth_report = report(result.trace, result.plan, spec.references,
                                  tolerance=config.tolerance)
            exploration = {
                "failure_step": result.failure_step,
                "plan_text": render(result.plan),
                "report": synth_report.to_dict(),
            }

    return RunResult(status="ok", model_name=model_name, report=rep, **meta)


# ---------------------------------------------------------------------------
# Batch aggregation

@dataclass
class BatchResult:
    results: list[RunResult] = field(default_factory=list)

    def aggregate(self) -> dict[tuple[str, str], dict]:
        cells: dict[tuple[str, str], dict] = {}
        for r in self.results:
            key = (r.model_name or "?", r.variant)
            cell = cells.setdefault(key, {"stability": [], "iou": [], "skipped": 0})
            if r.status == "ok":
                cell["stability"].append(r.report.stability)
                cell["iou"].append(r.report.iou)
            else:
                cell["skipped"] += 1
        return cells

    def to_records(self) -> list[dict]:
        records = []
        for (model, variant), cell in sorted(self.aggregate().items()):
            n = len(cell["stability"])
            records.append(
                {
                    "model": model,
                    "variant": variant,
                    "n": n,
                    "skipped": cell["skipped"],
                    "stability_mean": sum(cell["stability"]) / n if n else None,
                    "iou_mean": sum(cell["iou"]) / n if n else None,
                }
            )
        return records

    def render_table(self) -> str:
        """Aligned text grid: rows are models, columns variant x metric."""
        cells = self.aggregate()
        models = sorted({m for m, _ in cells})
        variants = sorted({v for _, v in cells})
        header = ["model"] + [f"{v}/{metric}" for v in variants for metric in ("stable", "iou")]
        rows = [header]
        for m in models:
            row = [m]
            for v in variants:
                cell = cells.get((m, v))
                if cell is None or not cell["stability"]:
                    row += ["-", "-"]
                else:
                    row += [
                        f"{sum(cell['stability']) / len(cell['stability']):.2f}",
                        f"{sum(cell['iou']) / len(cell['iou']):.2f}",
                    ]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        return "\n".join(lines)


def batch(configs, workers: int = 4) -> BatchResult:
    """Run many configs concurrently; skipped runs appear as gaps."""
    configs = list(configs)
    if not configs:
        raise ValueError("batch needs at least one run config")
    out = BatchResult()
    if workers <= 1 or len(configs) == 1:
        out.results = [run(c) for c in configs]
        return out
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        out.results = list(pool.map(run, configs))
    return out


def batch_from_transcripts(scenario: str, transcript_paths, mode: str = "permissive",
                           seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
                           workers: int = 4) -> BatchResult:
    """Score every record of every transcript file against one scenario."""
    out = BatchResult()
    jobs = []
    for path in transcript_paths:
        for record in read_transcript(path):
            jobs.append((path, record))

    def score_one(job):
        path, record = job
        meta = dict(scenario=scenario, mode=mode, seed=seed,
                    variant=record.prompt_variant)
        try:
            spec = resolve_scenario(scenario)
            rep, _, _ = score_response(record.response_text, spec, mode, seed, tolerance)
            return RunResult(status="ok", model_name=record.model_name, report=rep, **meta)
        except (UnknownScenario, UnknownObject) as exc:
            return RunResult(status="skipped", model_name=record.model_name,
                             reason=f"{type(exc).__name__}: {exc}", **meta)

    if workers <= 1 or len(jobs) <= 1:
        out.results = [score_one(j) for j in jobs]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            out.results = list(pool.map(score_one, jobs))
    return out


def replay(scenario: str, transcript_path: str | Path, mode: str = "permissive",
           seed: int = 0, tolerance: float = DEFAULT_TOLERANCE) -> list[str]:
    """Deterministic re-scoring of a transcript; returns canonical JSON lines.

    Identical (transcript, scenario, seed, mode) inputs produce byte-identical
    output lines.
    """
    result = batch_from_transcripts(scenario, [transcript_path], mode=mode,
                                    seed=seed, tolerance=tolerance, workers=1)
    return [json.dumps(r.to_dict(), sort_keys=True) for r in result.results]
