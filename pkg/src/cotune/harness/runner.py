"""Deterministic training runs with streamed CSV logs.

A run directory holds:

    config.txt        the exact configuration (key-value format)
    run.json          schema version, method label, status
    metrics.csv       one BalanceRecord per logged step (fixed column order)
    extras.csv        per-step diagnostics outside the fixed schema
    events.json       scheduler refreshes, coordinate-descent switches, evals
    last.ckpt         latest checkpoint (kept when a run aborts)
    backbone.ckpt     the frozen backbone the run started from
    abort.json        present only after a numeric abort

Synthetic-objective runs write ``trajectory.json``, ``constants.json`` and
``bound.json`` instead of the balance logs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint, theory
from ..errors import ConfigError, NumericAbort
from ..metrics import CSV_COLUMNS, BalanceRecord
from ..model import Batch, ToyMLLM
from ..optim import AdamState, commit_step
from ..schedulers import Scheduler
from ..tasks import END, Dataset, generate_dataset, pretrain_backbone
from ..tensor import ContractError, NonFiniteError
from .config import ExperimentConfig, save_config

SCHEMA_VERSION = 1
EXTRA_COLUMNS = ("step", "dS_after_T", "kappa_degenerate", "updS", "updT",
                 "forwards", "backwards", "probe_forwards")
SYNTHETIC_COLUMNS = ("step", "objective", "grad_sq", "combined_norm")

_BACKBONES: dict[tuple, dict[str, np.ndarray]] = {}
_DATASETS: dict[str, Dataset] = {}


@dataclass
class RunLog:
    config: ExperimentConfig
    run_dir: Path
    rows: list[BalanceRecord] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    status: str = "running"
    schema_version: int = SCHEMA_VERSION


def fmt(value) -> str:
    """CSV cell: repr for floats (round-trips exactly), blank for None."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dataset_for(config: ExperimentConfig) -> Dataset:
    spec = config.task_spec()
    key = spec.hash()
    if key not in _DATASETS:
        _DATASETS[key] = generate_dataset(spec)
    return _DATASETS[key]


def backbone_for(config: ExperimentConfig) -> dict[str, np.ndarray]:
    """Frozen backbone: loaded from ``config.backbone`` or pretrained (memoized per process)."""
    spec = config.task_spec()
    if config.backbone:
        try:
            arrays, meta = checkpoint.load(config.backbone)
        except (OSError, checkpoint.CheckpointError) as e:
            raise ConfigError(f"cannot load backbone {config.backbone}: {e}") from None
        if meta.get("spec_hash") != spec.hash():
            raise ConfigError("backbone was prepared for a different task spec")
        return arrays
    key = (spec.hash(), config.model_shape(), config.pretrain_steps, config.pretrain_lr, config.seed)
    if key not in _BACKBONES:
        res = pretrain_backbone(spec, config.pretrain_steps, lr=config.pretrain_lr,
                                shape=config.model_shape(), seed=config.seed)
        _BACKBONES[key] = res.backbone
    return _BACKBONES[key]


def sample_batch(examples, config: ExperimentConfig, step: int) -> Batch:
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 3_000_000 + step])))
    idx = g.choice(len(examples), size=min(config.batch_size, len(examples)), replace=False)
    return Batch.from_examples([examples[i] for i in idx], n_soft=config.n_soft, end_token=END)


def evaluate(model: ToyMLLM, examples, kind: str) -> float:
    """Greedy-decoding accuracy: exact match for qa, per-token accuracy for caption."""
    feats = np.stack([e.feature for e in examples])
    max_len = max(len(e.answer) for e in examples) + 1
    preds = model.greedy_decode_many(feats, [e.instruction for e in examples], max_len)
    if kind == "qa":
        return float(np.mean([list(p) == list(e.answer) for p, e in zip(preds, examples)]))
    hits = total = 0
    for p, e in zip(preds, examples):
        total += len(e.answer)
        hits += sum(1 for j, a in enumerate(e.answer) if j < len(p) and p[j] == a)
    return hits / total


class _Writer:
    """Line-buffered CSV writer; every row is flushed so an abort leaves a valid prefix."""

    def __init__(self, path: Path, columns):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(columns)
        self.fh.flush()

    def row(self, values) -> None:
        self.w.writerow([fmt(v) for v in values])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_meta(config: ExperimentConfig, status: str, **extra) -> dict:
    return {"schema_version": SCHEMA_VERSION, "columns": list(CSV_COLUMNS), "method": config.method,
            "task": config.task, "seed": config.seed, "status": status, **extra}


def run_experiment(config: ExperimentConfig, run_dir: str | Path | None = None) -> RunLog:
    config.validate()
    out = Path(run_dir) if run_dir is not None else config.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    for stale in ("abort.json", "bound.json"):
        (out / stale).unlink(missing_ok=True)
    save_config(config, out / "config.txt")
    if config.is_synthetic:
        return _run_synthetic(config, out)
    return _run_model(config, out)


def _run_model(config: ExperimentConfig, out: Path) -> RunLog:
    log = RunLog(config=config, run_dir=out)
    _write_json(out / "run.json", _run_meta(config, "running"))
    ds = dataset_for(config)
    backbone = backbone_for(config)
    spec = ds.spec

    model = ToyMLLM(config.model_shape(), seed=config.seed, end_token=END)
    model.load_backbone(backbone)
    checkpoint.save(out / "backbone.ckpt", backbone, {"spec_hash": spec.hash()})
    frozen = model.backbone_checksum()
    sched = Scheduler(config.scheduler_config())
    adam = None
    if config.backend == "adam":
        adam = {c: AdamState(alpha=config.base_lr_S, beta2=config.beta2, eps=config.adam_eps) for c in "ST"}
    reg, measure = config.regularizer_config(), config.measure_config()

    metrics_w = _Writer(out / "metrics.csv", CSV_COLUMNS)
    extras_w = _Writer(out / "extras.csv", EXTRA_COLUMNS)
    model.save(out / "last.ckpt", {"step": 0})
    step = 0
    try:
        for step in range(config.steps + 1):
            final = step == config.steps
            batch = sample_batch(ds.train, config, step)
            rec = commit_step(model, batch, sched.rates, reg=reg, backend=config.backend, adam=adam,
                              measure=measure, step=step, apply=not final)
            sched.step_rates(rec)
            if not math.isfinite(rec.loss):
                raise NonFiniteError(f"non-finite loss at step {step}")
            if step % config.eval_cadence == 0 or final:
                if model.backbone_checksum() != frozen:
                    raise ContractError(f"frozen backbone changed by step {step}")
                rec.eval_acc = evaluate(model, ds.eval, spec.kind)
                log.evals.append((step, rec.eval_acc))
            rec.check_finite()
            if step % config.log_cadence == 0 or final:
                rec.detail = None
                log.rows.append(rec)
                metrics_w.row(rec.csv_values())
                extras_w.row([step, rec.d_S_after_T, rec.kappa_degenerate, rec.upd_S, rec.upd_T,
                              rec.forwards, rec.backwards, rec.probe_forwards])
            if final or (step + 1) % config.checkpoint_cadence == 0:
                # parameters after the update of this step
                model.save(out / "last.ckpt", {"step": step + (0 if final else 1)})
    except (NonFiniteError, FloatingPointError) as e:
        log.status = "aborted"
        log.events = _events(sched, log, config.steps)
        _write_json(out / "events.json", log.events)
        _write_json(out / "abort.json", {"step": step, "error": str(e)})
        _write_json(out / "run.json", _run_meta(config, "aborted", abort_step=step))
        raise NumericAbort(f"{out}: {e}") from e
    finally:
        metrics_w.close()
        extras_w.close()
    log.status = "complete"
    log.events = _events(sched, log, config.steps)
    _write_json(out / "events.json", log.events)
    _write_json(out / "run.json", _run_meta(config, "complete", steps=config.steps))
    return log


def _events(sched: Scheduler, log: RunLog, steps: int) -> list[dict]:
    ev = [e for e in sched.events if e["step"] <= steps]
    ev += [{"event": "eval", "step": s, "acc": a} for s, a in log.evals]
    return sorted(ev, key=lambda e: (e["step"], e["event"]))


def synthetic_problem(config: ExperimentConfig) -> theory.LogisticProblem:
    return theory.LogisticProblem.generate(config.seed, n=config.synth_samples, d=config.synth_dim,
                                           lam=config.synth_lambda)


def _run_synthetic(config: ExperimentConfig, out: Path) -> RunLog:
    log = RunLog(config=config, run_dir=out)
    problem = synthetic_problem(config)
    traj = theory.run_synthetic_adam(problem, config.steps, config.synth_alpha, config.beta2,
                                     config.seed, batch=config.synth_batch, eps=config.adam_eps)
    theory.save_trajectory(traj, out / "trajectory.json")
    w = _Writer(out / "synthetic.csv", SYNTHETIC_COLUMNS)
    for k in range(traj.K + 1):
        w.row([k, traj.objective[k], traj.grad_sq[k], traj.combined_norms[k] if k < traj.K else None])
    w.close()
    meta = {"schema_version": SCHEMA_VERSION, "method": "bound", "task": config.task,
            "seed": config.seed, "status": "complete", "steps": config.steps}
    if traj.K >= 1:
        inputs = theory.analytic_inputs(problem, traj)
        (out / "constants.json").write_text(inputs.to_json() + "\n")
        result = theory.verify_trajectory(traj, inputs)
        _write_json(out / "bound.json", result)
        log.events.append({"event": "bound", "step": traj.K, **result})
    _write_json(out / "run.json", meta)
    log.status = "complete"
    return log


def run_many(configs, workers: int = 1) -> list[Path]:
    """Run independent configs, optionally in worker processes; returns the run directories."""
    if workers <= 1:
        return [run_experiment(c).run_dir for c in configs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(workers) as pool:
        return [log_dir for log_dir in pool.map(_run_one, configs)]


def _run_one(config: ExperimentConfig) -> Path:
    return run_experiment(config).run_dir


def completed_run(config: ExperimentConfig, run_dir: str | Path | None = None) -> Path | None:
    """The run directory if it already holds a complete run of exactly this config."""
    from .config import serialize

    d = Path(run_dir) if run_dir is not None else config.run_dir()
    try:
        meta = json.loads((d / "run.json").read_text())
        same = (d / "config.txt").read_text() == serialize(config)
    except (OSError, json.JSONDecodeError):
        return None
    return d if same and meta.get("status") == "complete" else None


def ensure_run(config: ExperimentConfig) -> Path:
    """Reuse a complete run of the same config, otherwise run it."""
    return completed_run(config) or run_experiment(config).run_dir
