"""Command-line entry point: ``edgemeta <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import jsonschema

from .curriculum import ConfigError, RunConfig, dumps, export_metrics, infer, load_checkpoint, run_curriculum
from .nsi import NsiError
from .scenario import ScenarioError, ScenarioSpec, load_schema, synthesize_dataset, validate_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with RunConfig fields (flags override it)")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float, "bool": _bool}.get(str(f.type), str)
        p.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper())
    p.add_argument("--inject-cpu-bias", action="store_true",
                   help="enable the CPU-bias reward fault at its default magnitude")


def _run_config(args) -> RunConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    names = {f.name for f in dataclasses.fields(RunConfig)}
    base.update({k: v for k, v in vars(args).items() if k in names and v is not None})
    if args.inject_cpu_bias and not base.get("w_cpu_bias"):
        from .experiments import FAULT_CPU_BIAS
        base["w_cpu_bias"] = FAULT_CPU_BIAS
    return RunConfig.from_dict(base)


def cmd_run_curriculum(args) -> int:
    config = _run_config(args)
    report = run_curriculum(config)
    report.pop("runner", None)
    report.pop("traces", None)
    for s in report["steps"]:
        if "error" in s:
            print(f"{s['step']}: {s['error']}: {s['message']}")
        else:
            flags = ",".join(s["metrics"]["flags"]) or "-"
            print(f"{s['step']}: isr={s['eval']['isr']:.3f} flags={flags} "
                  f"directives={len(s['directives'])}")
    if args.report:
        Path(args.report).write_text(dumps(report))
    return EXIT_RUNTIME if any("error" in s for s in report["steps"]) else EXIT_OK


def cmd_infer(args) -> int:
    net, spec = load_checkpoint(args.checkpoint)
    items = json.loads(Path(args.intents).read_text())
    if isinstance(items, dict):
        items = [items]
    for d in infer(net, spec, items, sequential=args.sequential):
        print(json.dumps(d, sort_keys=True))
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    for path in export_metrics(args.run_dir, args.format):
        print(path)
    return EXIT_OK


def cmd_validate_scenario(args) -> int:
    data = json.loads(Path(args.scenario).read_text())
    try:
        jsonschema.validate(data, load_schema("scenario.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ValidationFailure(f"schema: {exc.message}") from exc
    spec = ScenarioSpec.from_dict(data)
    requests = synthesize_dataset(spec) if args.with_dataset else None
    report = validate_scenario(spec, requests)
    print(json.dumps(report.to_dict(), indent=1))
    if not report.ok:
        raise ValidationFailure(f"{len(report)} violation(s)")
    return EXIT_OK


def cmd_gen_replay(args) -> int:
    from .gir import CvaeModel, RecordCodec, synthesize_replay, write_records_jsonl

    step = Path(args.step_dir)
    blob = json.loads((step / "gir_model.json").read_text())
    spec = ScenarioSpec.load(step / "scenario.json")
    codec = RecordCodec(spec, blob["tags"])
    model = CvaeModel.from_dict(blob["model"])
    tags = args.tag or None
    records = synthesize_replay(model, codec, args.count, seed=args.seed, tags=tags)
    if args.out:
        write_records_jsonl(args.out, records)
    else:
        for r in records:
            print(json.dumps(r.to_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgemeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-curriculum", help="generate, train, evaluate and correct over the curriculum")
    _add_config_flags(p)
    p.add_argument("--report", help="write the curriculum report JSON here")
    p.set_defaults(func=cmd_run_curriculum)

    p = sub.add_parser("infer", help="scheduling decisions for structured intents")
    p.add_argument("checkpoint")
    p.add_argument("intents", help="JSON list of {service, intent, user_position}")
    p.add_argument("--sequential", action="store_true", help="keep network state between intents")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-metrics", help="write episodes.csv and steps.json for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("csv", "json", "both"), default="both")
    p.set_defaults(func=cmd_export_metrics)

    p = sub.add_parser("validate-scenario", help="schema and consistency checks for a scenario file")
    p.add_argument("scenario")
    p.add_argument("--with-dataset", action="store_true", help="also synthesise and check its dataset")
    p.set_defaults(func=cmd_validate_scenario)

    p = sub.add_parser("gen-replay", help="sample replay records from a saved step's GIR model")
    p.add_argument("step_dir")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tag", action="append", help="keep records with this scenario tag (repeatable)")
    p.add_argument("--out", help="JSONL output file (stdout otherwise)")
    p.set_defaults(func=cmd_gen_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, ConfigError, ScenarioError, NsiError, jsonschema.ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
