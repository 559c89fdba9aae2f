"""Command-line entry point.

Exit codes: 0 ok, 1 bound not satisfied (verify-bound), 2 configuration or
input error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint, theory
from .errors import ConfigError, NumericAbort
from .harness import config as hconfig
from .harness import emit_report, preset, run_experiment, run_many
from .harness.report import SchemaError
from .harness.runner import backbone_for, synthetic_problem
from .tasks import PRESETS, TaskSpec, dump_text, generate_dataset, save_dataset, task_preset
from .tensor import ContractError


def _spec_from_arg(value: str, seed: int | None) -> TaskSpec:
    if value in PRESETS:
        return task_preset(value, seed or 0)
    try:
        spec = TaskSpec.from_dict(json.loads(Path(value).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"--spec must be a preset name {tuple(PRESETS)} or a JSON spec file ({e})") from None
    return spec if seed is None else replace(spec, seed=seed)


def cmd_gen_data(args) -> int:
    spec = _spec_from_arg(args.spec, args.seed)
    spec.validate()
    ds = generate_dataset(spec)
    save_dataset(ds, args.out)
    if args.text:
        Path(args.out).with_suffix(".txt").write_text(dump_text(ds))
    print(f"wrote {len(ds.train)} train / {len(ds.eval)} eval examples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = hconfig.load_config(args.config)
    cfg.validate()
    if cfg.is_synthetic:
        raise ConfigError("the synthetic objective has no backbone")
    arrays = backbone_for(replace(cfg, backbone=""))
    checkpoint.save(args.out, arrays, {"spec_hash": cfg.task_spec().hash(),
                                       "pretrain_steps": cfg.pretrain_steps})
    print(f"wrote backbone to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = hconfig.load_config(args.config)
    if args.out_dir:
        cfg = replace(cfg, output_dir=args.out_dir)
    log = run_experiment(cfg)
    print(f"{log.status}: {log.run_dir}")
    return 0


def cmd_report(args) -> int:
    summary = emit_report(args.runs, args.out, plots=not args.no_plots)
    for row in summary["kappa_std_by_method"]:
        print(f"{row['task']:12s} {row['method']:12s} std(kappa) {row['mean_std_kappa']:.6g} over {row['runs']} runs")
    return 0


def cmd_verify_bound(args) -> int:
    run = Path(args.run)
    traj = theory.load_trajectory(run / "trajectory.json")
    if args.constants == "analytic":
        inputs = theory.BoundInputs.from_json((run / "constants.json").read_text())
    elif args.constants == "estimate":
        problem = synthetic_problem(hconfig.load_config(run / "config.txt"))
        inputs = theory.estimate_constants(traj, problem.grad)
    else:
        inputs = theory.BoundInputs.from_json(Path(args.constants).read_text())
    result = theory.verify_trajectory(traj, inputs, strict=args.strict)
    text = json.dumps(result, indent=2, sort_keys=True)
    (run / "bound_verification.json").write_text(text + "\n")
    print(text)
    return 0 if result["satisfied"] else 1


def cmd_preset(args) -> int:
    configs = preset(args.name, output_dir=args.out_dir, smoke=args.smoke)
    cfg_dir = Path(args.out_dir) / "configs"
    cfg_dir.mkdir(parents=True, exist_ok=True)
    for c in configs:
        hconfig.save_config(c, cfg_dir / f"{c.run_name}.txt")
    print(f"wrote {len(configs)} configs to {cfg_dir}")
    if args.run:
        for d in run_many(configs, workers=args.workers):
            print(d)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cotune", description="Balanced encoder/adapter tuning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="task preset name or JSON spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--text", action="store_true", help="also write a human-readable dump")
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pretrain", help="prepare and save the frozen backbone")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("train", help="run one experiment")
    g.add_argument("--config", required=True)
    g.add_argument("--out-dir", help="override output_dir")
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("report", help="plots and comparison tables")
    g.add_argument("--runs", nargs="+", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--no-plots", action="store_true")
    g.set_defaults(fn=cmd_report)

    g = sub.add_parser("verify-bound", help="check the convergence bound on a synthetic run")
    g.add_argument("--run", required=True)
    g.add_argument("--constants", default="analytic",
                   help="'analytic' (run's constants.json), 'estimate', or a BoundInputs JSON file")
    g.add_argument("--strict", action="store_true", help="reject estimated f*")
    g.set_defaults(fn=cmd_verify_bound)

    g = sub.add_parser("preset", help="write (and optionally run) a named experiment set")
    g.add_argument("--name", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--smoke", action="store_true")
    g.add_argument("--run", action="store_true")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(fn=cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3
    except (ConfigError, SchemaError, ContractError, theory.DomainError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
