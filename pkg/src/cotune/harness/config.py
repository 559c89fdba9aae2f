"""Experiment configuration and its key-value text format.

One setting per line, ``key = value``, where the value is a JSON literal
(strings quoted, ``true``/``false``, numbers). Blank lines and lines starting
with ``#`` are ignored. Unknown keys are rejected; omitted keys keep their
defaults. ``serialize`` writes every field in declaration order, so a run
directory always carries the complete configuration.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..metrics import KAPPA_FLOOR, KAPPA_MAX, KAPPA_MIN, KINDS
from ..model import ModelShape
from ..optim import MeasureConfig, RegularizerConfig
from ..schedulers import STRATEGIES, SchedulerConfig
from ..tasks import PRESETS, TaskSpec, task_preset

SYNTHETIC = "synthetic-logistic"
TASKS = tuple(PRESETS) + (SYNTHETIC,)
BACKENDS = ("sgd", "adam")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = ""  # empty: derived from the content, see ``run_name``
    task: str = "toy-qa"
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    log_cadence: int = 1
    eval_cadence: int = 50
    checkpoint_cadence: int = 250
    output_dir: str = "runs"
    # data
    noise: float = 0.1
    n_train: int = 512
    n_eval: int = 128
    # model shape
    dim: int = 32
    n_blocks: int = 2
    n_soft: int = 4
    rank: int = 4
    max_seq: int = 24
    mlp_hidden: int = 64
    enc_hidden: int = 32
    # frozen backbone preparation
    pretrain_steps: int = 400
    pretrain_lr: float = 3e-3
    backbone: str = ""  # checkpoint from ``pretrain``; empty: pretrain on demand
    # optimizer
    backend: str = "adam"
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # scheduler
    strategy: str = "constant"
    base_lr_S: float = 1e-4
    base_lr_T: float = 1e-4
    up_lr: float = 1e-3
    alpha: float = 1e-4
    gamma: float = 0.5
    n_kappa: int = 8
    period: int = 10
    kappa_feed: str = "every-step"
    cd_threshold: float = 1e-6
    cd_patience: int = 20
    cd_max_phase: int = 1000
    # measurement
    distance: str = "tv"
    kappa_mode: str = "scaled"
    kappa_floor: float = KAPPA_FLOOR
    kappa_min: float = KAPPA_MIN
    kappa_max: float = KAPPA_MAX
    joint_probe: bool = True
    # look-ahead regularizer
    reg_enabled: bool = False
    reg_lambda: float = 1.0
    reg_distance: str = "sqrt_js"
    # synthetic objective (task = synthetic-logistic)
    synth_alpha: float = 0.01
    synth_lambda: float = 1.0
    synth_batch: int = 8
    synth_samples: int = 64
    synth_dim: int = 5

    # ------------------------------------------------------------ derived views
    @property
    def is_synthetic(self) -> bool:
        return self.task == SYNTHETIC

    @property
    def method(self) -> str:
        """Label used in comparison tables."""
        if self.strategy == "coordinated":
            return "commit" if self.reg_enabled and self.reg_lambda != 0 else "commit-clr"
        if self.strategy == "constant":
            if self.base_lr_T > self.base_lr_S:
                return "language-up"
            if self.base_lr_S > self.base_lr_T:
                return "vision-up"
        return self.strategy

    def task_spec(self) -> TaskSpec:
        base = task_preset(self.task, self.seed)
        return replace(base, noise=self.noise, n_train=self.n_train, n_eval=self.n_eval)

    def model_shape(self) -> ModelShape:
        spec = self.task_spec()
        return ModelShape(
            vocab=spec.vocab, dim=self.dim, n_blocks=self.n_blocks, n_soft=self.n_soft,
            feat_dim=spec.feat_dim, rank=self.rank, max_seq=self.max_seq,
            mlp_hidden=self.mlp_hidden, enc_hidden=self.enc_hidden,
        )

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(
            strategy=self.strategy, base_lr_S=self.base_lr_S, base_lr_T=self.base_lr_T,
            up_lr=self.up_lr, alpha=self.alpha, gamma=self.gamma, n_kappa=self.n_kappa,
            period=self.period, kappa_feed=self.kappa_feed, cd_threshold=self.cd_threshold,
            cd_patience=self.cd_patience, cd_max_phase=self.cd_max_phase,
            kappa_min=self.kappa_min, kappa_max=self.kappa_max,
        )

    def measure_config(self) -> MeasureConfig:
        return MeasureConfig(
            kind=self.distance, gamma=self.gamma, floor=self.kappa_floor,
            kappa_min=self.kappa_min, kappa_max=self.kappa_max,
            kappa_mode=self.kappa_mode, joint_probe=self.joint_probe,
        )

    def regularizer_config(self) -> RegularizerConfig:
        return RegularizerConfig(enabled=self.reg_enabled, lam=self.reg_lambda, kind=self.reg_distance)

    def digest(self) -> str:
        """Hash of every field except the output location."""
        body = {k: v for k, v in asdict(self).items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    @property
    def run_name(self) -> str:
        if self.name:
            return self.name
        label = "bound" if self.is_synthetic else self.method
        return f"{label}-{self.task}-s{self.seed}-{self.digest()[:8]}"

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_name

    # ------------------------------------------------------------ validation
    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if "/" in self.name or self.name in (".", ".."):
            raise ConfigError("name must be a single path component")
        for key in ("steps", "pretrain_steps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("batch_size", "log_cadence", "eval_cadence", "checkpoint_cadence",
                    "synth_batch", "synth_samples", "synth_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if not 0.0 < self.beta2 <= 1.0:
            raise ConfigError("beta2 must lie in (0, 1]")
        for key in ("distance", "reg_distance"):
            if getattr(self, key) not in KINDS:
                raise ConfigError(f"{key} must be one of {KINDS}")
        if self.kappa_mode not in ("scaled", "raw"):
            raise ConfigError("kappa_mode must be 'scaled' or 'raw'")
        if not 0 < self.kappa_min <= 1.0 <= self.kappa_max:
            raise ConfigError("need 0 < kappa_min <= 1 <= kappa_max")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite")
        if self.is_synthetic:
            if self.backend != "adam":
                raise ConfigError("the synthetic objective runs on the adam backend only")
            if self.synth_alpha <= 0 or self.synth_lambda < 0:
                raise ConfigError("synth_alpha must be > 0 and synth_lambda >= 0")
            return
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        self.task_spec().validate()
        self.scheduler_config().validate()
        shape = self.model_shape()
        longest = shape.n_soft + 2 + self.task_spec().answer_len[1] + 1
        if longest > shape.max_seq:
            raise ConfigError(f"max_seq {shape.max_seq} is shorter than the longest sequence {longest}")


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    kind = _FIELDS[key].type
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
    elif kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
    elif kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        value = float(value)
    elif not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def serialize(config: ExperimentConfig) -> str:
    lines = ["# cotune experiment config"]
    for key, value in asdict(config).items():
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, rest = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            value = json.loads(rest.strip())
        except json.JSONDecodeError as e:
            raise ConfigError(f"line {lineno}: value for {key!r} is not a JSON literal ({e.msg})") from None
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse(text)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(config))
