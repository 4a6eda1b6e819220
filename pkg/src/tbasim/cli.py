"""Command line entry point: ``tbasim <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 1 internal error.
Output locations are taken relative to ``--out`` (default: the config's
``output_dir``); an ``--out`` ending in a file extension names the file itself.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .errors import DataError, ParameterError
from .harness import (
    Mode,
    Strategy,
    evaluate_logs,
    load_config,
    make_scenes,
    report,
    run_comparison,
    run_episode,
    split_scenes,
    strategy_config,
    training_logs,
)
from .lifecycle import EpisodeRecord
from .oracle import ConfidenceModel, train_confidence_model
from .selftest import run_selftest
from .world import dumps_scene, generate_scenario, loads_scene

_FILE_SUFFIXES = (".json", ".jsonl", ".csv", ".md")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=default, help="base seed (overrides the config)")
    p.add_argument("--out", default=default, help="output directory or file")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=default)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbasim", description="Tracking-by-attention assignment simulator")
    _global_flags(parser, None)
    # the same flags after the subcommand must not reset values given before it
    common = _Parser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate a scene and write its JSON")
    p.add_argument("--scene-id", type=int, default=0)

    p = sub.add_parser("run", parents=[common], help="run one episode and write JSON-lines logs")
    p.add_argument("--scene", help="scene JSON (default: generate from config and seed)")
    p.add_argument("--scene-id", type=int, default=0)
    p.add_argument("--model", help="ConfidenceModel JSON (default: heuristic confidence)")
    p.add_argument("--start", type=int, default=None)
    p.add_argument("--end", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="fit a ConfidenceModel")
    p.add_argument("--logs", help="JSON-lines training logs (default: generate from the training scenes)")

    p = sub.add_parser("evaluate", parents=[common], help="compute a MetricsReport from episode logs")
    p.add_argument("--logs", required=True, help="JSON-lines episode logs")

    p = sub.add_parser("compare", parents=[common], help="run the full strategy ablation")
    p.add_argument("--num-scenes", type=int, default=None)

    sub.add_parser("selftest", parents=[common], help="run the brute-force oracle suites")
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.strategy is not None:
        cfg = replace(cfg, strategy=Strategy(args.strategy))
    cfg.validate()
    return cfg


def _target(out: str, default_name: str) -> str:
    if out.endswith(_FILE_SUFFIXES):
        path = out
    else:
        path = os.path.join(out, default_name)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _write(path: str, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _read_logs(path: str) -> list[EpisodeRecord]:
    try:
        with open(path) as fh:
            return [EpisodeRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise ParameterError(f"cannot read logs {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed episode log {path}: {exc}") from exc


def _read_json(path: str, what: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ParameterError(f"cannot read {what} {path}: {exc}") from exc


def cmd_simulate(args, cfg) -> int:
    scene = generate_scenario(cfg.scenario, cfg.seed, scene_id=args.scene_id)
    path = _target(cfg.output_dir, "scene.json")
    _write(path, dumps_scene(scene) + "\n")
    print(path)
    return 0


def cmd_run(args, cfg) -> int:
    if args.scene:
        try:
            scene = loads_scene(_read_json(args.scene, "scene"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed scene {args.scene}: {exc}") from exc
    else:
        scene = generate_scenario(cfg.scenario, cfg.seed, scene_id=args.scene_id)
    model = None
    if args.model:
        try:
            model = ConfidenceModel.from_dict(json.loads(_read_json(args.model, "model")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed model {args.model}: {exc}") from exc
    frame_range = None
    if args.start is not None or args.end is not None:
        frame_range = (args.start or 0, len(scene.frames) if args.end is None else args.end)
    mode = Mode(args.mode or Mode.TRAINING.value)
    cfg = strategy_config(cfg, cfg.strategy)
    records = run_episode(cfg, scene, mode, model=model, frame_range=frame_range)
    path = _target(cfg.output_dir, "episodes.jsonl")
    _write(path, "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))
    print(path)
    return 0


def cmd_train(args, cfg) -> int:
    if args.logs:
        logs = _read_logs(args.logs)
    else:
        train, _ = split_scenes(make_scenes(cfg), cfg.train_fraction)
        logs = training_logs(strategy_config(cfg, cfg.strategy), train, cfg.strategy)
    tr = cfg.training
    model, curve = train_confidence_model(logs, tr.epochs, tr.lr, cfg.seed, tr.batch_size, tr.pos_weight)
    path = _target(cfg.output_dir, "model.json")
    _write(path, model.dumps() + "\n")
    curve_path = os.path.join(os.path.dirname(path), "loss_curve.csv")
    _write(curve_path, "epoch,mean_loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    print(path)
    return 0


def cmd_evaluate(args, cfg) -> int:
    records = _read_logs(args.logs)
    if not records:
        raise DataError(f"no episode records in {args.logs}")
    m = evaluate_logs(records, cfg.num_thresholds, cfg.dist_threshold_m, cfg.seed, cfg.config_hash())
    path = _target(cfg.output_dir, "metrics.json")
    _write(path, m.dumps() + "\n")
    if not cfg.output_dir.endswith(_FILE_SUFFIXES):
        _write(_target(cfg.output_dir, "metrics.csv"), m.to_csv())
    print(path)
    return 0


def cmd_compare(args, cfg) -> int:
    if args.num_scenes is not None:
        cfg = replace(cfg, num_scenes=args.num_scenes)
    strategies = [Strategy(args.strategy)] if args.strategy else None
    comparison = run_comparison(cfg, strategies)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    for fmt, ext in (("json", "json"), ("csv", "csv"), ("markdown", "md")):
        _write(os.path.join(out, f"comparison.{ext}"), report(comparison, fmt))
    print(report(comparison, "markdown"), end="")
    return 0


def cmd_selftest(args, cfg) -> int:
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "run": cmd_run,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ParameterError, DataError) as exc:
        print(f"tbasim: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - anything else is a bug, reported as such
        print(f"tbasim: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
