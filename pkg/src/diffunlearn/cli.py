"""Command-line entry point.

Subcommands::

    train    train the starting model (or the retrain reference with --method retrain)
    unlearn  run one unlearning method and evaluate it
    eval     evaluate an existing checkpoint
    report   run several methods on one split and write table.csv

Every subcommand prints one JSON object on stdout. Failures exit nonzero
with ``{"status": "failed", "error": ...}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from . import experiment as ex


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=ex.METHODS)
    common.add_argument("--out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. unlearn.lam=0.2 (repeatable)")
    common.add_argument("--cache-dir", help="directory for cached starting/retrain checkpoints")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffunlearn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the starting model")
    sub.add_parser("unlearn", parents=[common], help="run one unlearning method")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint to evaluate (default: <out>/checkpoint.json)")
    rep = sub.add_parser("report", parents=[common], help="compare methods on one split")
    rep.add_argument("--methods", default=",".join(ex.METHODS), help="comma-separated method list")
    return p


def _config(args, method: str | None = None) -> dict:
    return ex.load_config(args.config, args.override, seed=args.seed, method=method or args.method,
                          out=args.out, cache_dir=args.cache_dir)


def _record_output(record: ex.RunRecord) -> tuple[int, dict]:
    d = record.to_dict()
    return (0 if record.status == "ok" else 1), d


def cmd_train(args) -> tuple[int, dict]:
    method = args.method or "unscrubbed"
    if method not in ("unscrubbed", "retrain"):
        raise ex.ConfigError("train accepts --method unscrubbed or retrain")
    return _record_output(ex.run_experiment(_config(args, method)))


def cmd_unlearn(args) -> tuple[int, dict]:
    return _record_output(ex.run_experiment(_config(args)))


def cmd_eval(args) -> tuple[int, dict]:
    config = _config(args)
    path = args.checkpoint or (Path(config["out"]) / "checkpoint.json" if config.get("out") else None)
    if path is None:
        raise ex.ConfigError("eval needs --checkpoint or --out")
    params, schedule, _, _ = checkpoint.load(path)
    setup = ex.build_setup(config)
    if schedule.digest() != setup.schedule.digest():
        raise ex.ConfigError("checkpoint schedule does not match the config")
    reference = ex.train_retrain(setup).params if config["eval"]["reference"] == "retrain" else None
    evaluation = ex.evaluate(setup, params, reference, {"checkpoint": str(path), "seed": config["seed"]})
    result = {"status": "ok", "report": json.loads(evaluation.report.to_json())}
    if config.get("out"):
        from .plots import emit_plots
        out = Path(config["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(evaluation.report.to_json())
        result["paths"] = {"report": str(out / "report.json"), **emit_plots(evaluation, setup, out)}
    return 0, result


def cmd_report(args) -> tuple[int, dict]:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    base = _config(args)
    configs = []
    for m in methods:
        c = dict(base, method=m)
        if base.get("out"):
            c["out"] = str(Path(base["out"]) / m)
        ex.validate_config(c)
        configs.append(c)
    rows, records = ex.compare_methods(configs)
    text = ex.table_text(rows)
    result = {"status": "ok" if all(r.status == "ok" for r in records) else "failed",
              "rows": rows, "table": text}
    if base.get("out"):
        out = Path(base["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.csv").write_text(ex.table_csv(rows))
        (out / "table.txt").write_text(text + "\n")
        result["paths"] = {"table": str(out / "table.csv")}
    failed = [r.to_dict() for r in records if r.status != "ok"]
    if failed:
        result["error"] = [f["error"] for f in failed]
    print(text, file=sys.stderr)
    return (0 if not failed else 1), result


COMMANDS = {"train": cmd_train, "unlearn": cmd_unlearn, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code, payload = COMMANDS[args.command](args)
    except Exception as exc:
        code, payload = 1, {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    print(json.dumps(payload, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
