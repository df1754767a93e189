"""Command-line entry point: gen, train, eval, report, experiment.

Configuration layers, lowest to highest precedence: built-in defaults, the
``--config`` file (YAML or JSON), ``MANGOLAB_*`` environment variables, then
command-line flags and ``--override KEY=VALUE`` pairs. The resolved result is
written into every output directory; timestamps go to a separate sidecar.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .benchgen.suite import BenchmarkSuite, SuiteParams, generate_suite, verify_suite
from .errors import ContractError, MangoLabError, NumericFault
from .evaluate import SPLITS, evaluate_suite
from .report import load_row, row_from_values, write_report
from .trainer import MODES, TrainConfig, load_model, load_state, run_training

log = logging.getLogger("mangolab")

ENV_PREFIX = "MANGOLAB_"
ENV_KEYS = {"SEED": "seed", "MODE": "train.mode", "SUITE": "suite_path", "OUT": "out"}
EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


# ---------------------------------------------------------------- config


def default_config() -> dict:
    return {
        "seed": 0,
        "out": None,
        "suite_path": None,
        "suite_preset": "small",
        "suite": {},
        "train": TrainConfig().to_dict(),
    }


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    data = yaml.safe_load(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ContractError(f"{path}: top level must be a mapping")
    return data


def merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def set_path(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    if parts[0] not in cfg:
        parts = ["train", *parts]
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ContractError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ContractError(f"override {text!r} is not KEY=VALUE")
    return key.strip(), yaml.safe_load(raw)


def env_overrides(environ=None) -> list[tuple[str, object]]:
    environ = os.environ if environ is None else environ
    out = []
    for name, key in ENV_KEYS.items():
        if ENV_PREFIX + name in environ:
            out.append((key, yaml.safe_load(environ[ENV_PREFIX + name])))
    extra = environ.get(ENV_PREFIX + "OVERRIDE")
    if extra:
        out.extend(parse_override(item) for item in extra.split(";") if item.strip())
    return out


def resolve_config(args, environ=None) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        cfg = merge(cfg, read_config_file(args.config))
    for key, value in env_overrides(environ):
        set_path(cfg, key, value)
    flags = {
        "seed": getattr(args, "seed", None),
        "train.mode": getattr(args, "mode", None),
        "suite_path": getattr(args, "suite", None),
        "out": getattr(args, "out", None),
    }
    for key, value in flags.items():
        if value is not None:
            set_path(cfg, key, value)
    for item in getattr(args, "override", None) or []:
        set_path(cfg, *parse_override(item))
    cfg["train"]["seed"] = cfg["seed"]
    TrainConfig.from_dict(cfg["train"])  # validate early
    return cfg


def suite_params_from(cfg: dict) -> SuiteParams:
    preset = cfg.get("suite_preset", "small")
    if preset == "small":
        base = SuiteParams.small(cfg["seed"]).to_dict()
    elif preset == "default":
        base = SuiteParams(seed=cfg["seed"]).to_dict()
    else:
        raise ContractError(f"unknown suite preset {preset!r}")
    base.update(cfg.get("suite") or {})
    unknown = set(base) - set(SuiteParams().to_dict())
    if unknown:
        raise ContractError(f"unknown suite options: {sorted(unknown)}")
    return SuiteParams(**base)


def prepare_out(path, overwrite: bool) -> Path:
    if path is None:
        raise ContractError("an output directory is required (--out)")
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ContractError(f"{out} is not empty; pass --overwrite to replace its contents")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_resolved(out: Path, cfg: dict, command: str, started: float) -> None:
    (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=1) + "\n")
    sidecar = {
        "command": command,
        "version": __version__,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "elapsed_seconds": round(time.time() - started, 3),
    }
    (out / "run_meta.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def load_suite(cfg: dict) -> BenchmarkSuite:
    if not cfg.get("suite_path"):
        raise ContractError("a suite directory is required (--suite)")
    return BenchmarkSuite.load(cfg["suite_path"])


# ---------------------------------------------------------------- commands


def format_stats(stats: dict) -> str:
    lines = ["questions per split/category:"]
    lines += [f"  {k:<16} {v}" for k, v in stats["counts"].items()]
    lines.append("mean question length:")
    lines += [f"  {k:<16} {v:.2f}" for k, v in stats["mean_length"].items()]
    for key, value in stats.items():
        if key not in ("counts", "mean_length"):
            lines.append(f"{key}: {json.dumps(value, sort_keys=True)}")
    return "\n".join(lines)


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(cfg["out"], args.overwrite)
    suite = generate_suite(suite_params_from(cfg))
    verify_suite(suite)
    suite.save(out)
    print(format_stats(suite.stats()))
    print(f"suite hash: {suite.content_hash()}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    cfg = resolve_config(args)
    suite = load_suite(cfg)
    config = TrainConfig.from_dict(cfg["train"])
    state = None
    if args.resume:
        state = load_state(args.resume)
        out = Path(cfg["out"]) if cfg["out"] else Path(args.resume).parent
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_out(cfg["out"], args.overwrite)
    cfg["suite_hash"] = suite.content_hash()
    write_resolved(out, cfg, "train", started)
    tick = time.perf_counter()
    state, records = run_training(config, suite, state=state, run_dir=out)
    elapsed = time.perf_counter() - tick
    write_resolved(out, cfg, "train", started)
    timing = {"train_seconds": elapsed, "steps_per_second": config.total_steps / elapsed if elapsed else None}
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True) + "\n")
    last = records[-1] if records else {}
    print(f"trained {config.mode} to step {state.step}; last record {json.dumps(last, sort_keys=True)}")
    if args.eval:
        report = evaluate_suite(state.model_config, state.params, suite, seed=config.seed, label=out.name)
        write_report_file(out / "report.json", report, config.mode)
    return EXIT_OK


def write_report_file(path: Path, report, mode: str | None) -> None:
    payload = report.to_dict()
    if mode is not None:
        payload["mode"] = mode
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def vocab_mismatch(meta: dict, suite: BenchmarkSuite) -> list[str]:
    problems = []
    for key, current in (("vocab", suite.vocab), ("answers", suite.answers)):
        saved = meta.get(key)
        if saved is None:
            problems.append(f"checkpoint carries no {key}")
        elif list(saved) != list(current):
            missing = sorted(set(saved) - set(current))
            added = sorted(set(current) - set(saved))
            problems.append(f"{key} differs: {len(saved)} vs {len(current)} entries; only in checkpoint {missing[:8]}; only in suite {added[:8]}")
    return problems


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    suite = load_suite(cfg)
    config, params, meta = load_model(args.checkpoint)
    problems = vocab_mismatch(meta, suite)
    if problems:
        for p in problems:
            print(f"refusing to evaluate: {p}", file=sys.stderr)
        return EXIT_ERROR
    ckpt_dir = Path(args.checkpoint).parent
    mode = None
    if (ckpt_dir / "config.json").exists():
        mode = json.loads((ckpt_dir / "config.json").read_text()).get("train", {}).get("mode")
    report = evaluate_suite(config, params, suite, split=args.split, seed=cfg["seed"], label=ckpt_dir.name)
    out = Path(cfg["out"]) if cfg["out"] else ckpt_dir / "report.json"
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.json"
    write_report_file(out, report, mode)
    d = report.to_dict()
    for name in report.scores:
        print(f"{name:<12} {report.scores[name]:8.2f}")
    print(f"{'meta_ave':<12} {d['meta_ave']:8.2f}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = [load_row(p) for p in args.runs]
    for spec in args.values or []:
        label, _, values = spec.partition("=")
        rows.append(row_from_values(label, [float(v) for v in values.split(",")]))
    if not rows:
        raise ContractError("nothing to report; pass run directories or --values")
    out = Path(args.out)
    written = write_report(rows, out, figures=not args.no_figures)
    print((out / ("modes.txt" if "modes.txt" in written else "runs.txt")).read_text(), end="")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import run_experiment

    started = time.time()
    cfg = resolve_config(args)
    out = prepare_out(cfg["out"], args.overwrite)
    suite = load_suite(cfg) if cfg.get("suite_path") else generate_suite(suite_params_from(cfg))
    base = TrainConfig.from_dict(cfg["train"])
    modes = args.modes.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_experiment(suite, base, modes, seeds, out / "runs")
    write_report([r.row() for r in result.runs], out / "report")
    summary = {"summary": result.summary()}
    if "mango" in modes and "clean" in modes:
        summary["checks"] = result.directional_checks()
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    write_resolved(out, cfg, "experiment", started)
    print((out / "report" / "modes.txt").read_text(), end="")
    print(json.dumps(summary, sort_keys=True, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mangolab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="set a config key; repeatable")

    p = sub.add_parser("gen", help="generate a benchmark suite")
    common(p)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model in one mode")
    common(p, "run directory")
    p.add_argument("--suite", help="suite directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--resume", help="training-state checkpoint to continue from")
    p.add_argument("--eval", action="store_true", help="evaluate after training and write report.json")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model checkpoint")
    common(p, "report path or directory (default: next to the checkpoint)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", help="suite directory")
    p.add_argument("--split", default="eval", choices=SPLITS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare evaluated runs")
    p.add_argument("runs", nargs="*", help="run directories or report files")
    p.add_argument("--out", required=True)
    p.add_argument("--values", action="append", metavar="LABEL=v1,...,v10", help="extra row in table column order")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="train and evaluate several modes and seeds")
    common(p)
    p.add_argument("--suite", help="suite directory (generated from the config when omitted)")
    p.add_argument("--mode", choices=MODES, help=argparse.SUPPRESS)
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericFault as fault:
        print(f"numeric fault: {fault}; {json.dumps(fault.record, sort_keys=True)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MangoLabError, OSError, yaml.YAMLError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
