"""Command-line interface: run | score | batch | explore | losses | replay.

Settings resolve flag > environment variable > config file > default; the
config file (--config, YAML) may set endpoint, voxkb, and tolerance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from stackeval import distill, explorer, harness
from stackeval.metrics import DEFAULT_TOLERANCE, report
from stackeval.planlang import operationalize, parse, render, resolve
from stackeval.scenarios import resolve_scenario
from stackeval.simcore import reachable
from stackeval.voxkb import load_default_kb, load_kb

_ENV_PREFIX = "STACKEVAL_"


def _setting(args, name: str, config: dict, default=None, cast=str):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    env = os.environ.get(_ENV_PREFIX + name.upper())
    if env is not None:
        return cast(env)
    if name in config:
        return cast(config[name])
    return default


def _load_config(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return yaml.safe_load(fh) or {}


def _kb_for(args, config):
    path = _setting(args, "voxkb", config)
    return load_kb(path) if path else load_default_kb()


def _add_common(sub):
    sub.add_argument("--scenario", required=True, help="scenario id or YAML path")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--mode", choices=["strict", "permissive"], default="permissive")
    sub.add_argument("--voxkb", help="voxeme KB file (default: packaged)")
    sub.add_argument("--tolerance", type=float, default=None,
                     help=f"displacement tolerance in m (default {DEFAULT_TOLERANCE})")
    sub.add_argument("--config", help="YAML config file")


def cmd_run(args) -> int:
    config = _load_config(args)
    tolerance = _setting(args, "tolerance", config, DEFAULT_TOLERANCE, float)
    if args.endpoint:
        source = harness.LiveSource(
            endpoint=_setting(args, "endpoint", config),
            model_name=args.model_name or "unknown-model",
            temperature=args.temperature,
        )
    else:
        if not args.transcript:
            print("run: need --transcript (canned) or --endpoint (live)", file=sys.stderr)
            return 2
        source = harness.CannedSource(path=args.transcript)
    cfg = harness.RunConfig(
        scenario=args.scenario, variant=args.variant, mode=args.mode,
        seed=args.seed, source=source, tolerance=tolerance,
        explore_on_failure=args.explore, transcript_out=args.transcript_out,
    )
    result = harness.run(cfg)
    print(json.dumps(result.to_dict(), sort_keys=True, indent=2))
    return 0 if result.status == "ok" else 1


def cmd_score(args) -> int:
    config = _load_config(args)
    tolerance = _setting(args, "tolerance", config, DEFAULT_TOLERANCE, float)
    result = harness.batch_from_transcripts(
        args.scenario, [args.transcript], mode=args.mode, seed=args.seed,
        tolerance=tolerance, workers=1,
    )
    for r in result.results:
        print(json.dumps(r.to_dict(), sort_keys=True))
    return 0


def cmd_batch(args) -> int:
    config = _load_config(args)
    tolerance = _setting(args, "tolerance", config, DEFAULT_TOLERANCE, float)
    result = harness.batch_from_transcripts(
        args.scenario, args.transcripts, mode=args.mode, seed=args.seed,
        tolerance=tolerance, workers=args.workers,
    )
    print(result.render_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for rec in result.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_explore(args) -> int:
    config = _load_config(args)
    kb = _kb_for(args, config)
    spec = resolve_scenario(args.scenario, kb=kb)
    scene = spec.scene()
    plan_text = Path(args.plan).read_text(encoding="utf-8")
    grounded = resolve(parse(plan_text), scene, seed=args.seed)
    trace = operationalize(grounded, scene, mode="strict")

    model = explorer.load_model(args.model) if args.model else None
    result = explorer.explore_after_failure(scene, trace, model=model, seed=args.seed,
                                            target_height=spec.target_height)
    if not result.triggered:
        print(json.dumps({"triggered": False}, indent=2))
        return 0

    synth_report = report(result.trace, result.plan, spec.references)
    ok, path = reachable(result.trace.final_scene, scene.agent, spec.target_height)
    out = {
        "triggered": True,
        "failure_step": result.failure_step,
        "plan_text": render(result.plan),
        "groundings": [
            {
                "object_id": d.object_id,
                "shape": d.shape,
                "label": d.label,
                "habitat_index": d.habitat_index,
                "neighbors": [list(s) for s in d.neighbor_sources],
            }
            for d in result.decisions
        ],
        "report": synth_report.to_dict(),
        "reachable": ok,
        "path": [s.surface_id for s in path],
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    if args.model_out:
        explorer.save_model(result.model, args.model_out)
        print(f"wrote {args.model_out}")
    return 0


def cmd_losses(args) -> int:
    lambdas = tuple(float(x) for x in args.lambda_.split(","))
    if len(lambdas) != 3:
        print("losses: --lambda needs three comma-separated weights", file=sys.stderr)
        return 2
    out = distill.losses_from_tensor_file(args.input, lambdas=lambdas, margin=args.margin)
    for name, value in out.items():
        print(f"{name} = {value:.12g}")
    return 0


def cmd_replay(args) -> int:
    config = _load_config(args)
    tolerance = _setting(args, "tolerance", config, DEFAULT_TOLERANCE, float)
    lines = harness.replay(args.scenario, args.transcript, mode=args.mode,
                           seed=args.seed, tolerance=tolerance)
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stackeval")
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="one evaluation run (canned or live)")
    _add_common(p_run)
    p_run.add_argument("--variant", choices=list(harness.VARIANTS), default=harness.FREE_TEXT)
    p_run.add_argument("--transcript", help="canned transcript (JSONL)")
    p_run.add_argument("--endpoint", help="live chat-completions base URL")
    p_run.add_argument("--model-name", dest="model_name")
    p_run.add_argument("--temperature", type=float, default=0.0)
    p_run.add_argument("--transcript-out", dest="transcript_out",
                       help="append live responses to this transcript")
    p_run.add_argument("--explore", action="store_true",
                       help="run exploration when a strict-mode step fails")
    p_run.set_defaults(func=cmd_run)

    p_score = subs.add_parser("score", help="score every record of a transcript")
    _add_common(p_score)
    p_score.add_argument("--transcript", required=True)
    p_score.set_defaults(func=cmd_score)

    p_batch = subs.add_parser("batch", help="aggregate a grid over transcripts")
    _add_common(p_batch)
    p_batch.add_argument("--transcripts", nargs="+", required=True)
    p_batch.add_argument("--workers", type=int, default=4)
    p_batch.add_argument("--out", help="write machine-readable records here")
    p_batch.set_defaults(func=cmd_batch)

    p_explore = subs.add_parser("explore", help="exploration loop from a failing plan")
    _add_common(p_explore)
    p_explore.add_argument("--plan", required=True, help="text file with the failing plan")
    p_explore.add_argument("--model", help="load a persisted grounding model")
    p_explore.add_argument("--model-out", dest="model_out", help="persist the trained model")
    p_explore.set_defaults(func=cmd_explore)

    p_losses = subs.add_parser("losses", help="evaluate loss terms from a tensor file")
    p_losses.add_argument("--input", required=True)
    p_losses.add_argument("--lambda", dest="lambda_", default="1,1,1")
    p_losses.add_argument("--margin", type=float, default=1.0)
    p_losses.set_defaults(func=cmd_losses)

    p_replay = subs.add_parser("replay", help="byte-stable re-scoring of a transcript")
    _add_common(p_replay)
    p_replay.add_argument("--transcript", required=True)
    p_replay.add_argument("--out")
    p_replay.set_defaults(func=cmd_replay)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
