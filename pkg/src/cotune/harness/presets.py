"""Named experiment sets."""
from __future__ import annotations

from dataclasses import replace

from ..errors import ConfigError
from .config import SYNTHETIC, ExperimentConfig

SEEDS = (0, 1, 2, 3, 4)
LOW, HIGH = 1e-4, 1e-3

# (label, base_lr_S, base_lr_T)
STUDY_RATES = (("synced", LOW, LOW), ("language-up", LOW, HIGH), ("vision-up", HIGH, LOW))

BENCH_METHODS = {
    "constant": dict(strategy="constant"),
    "feature-cd": dict(strategy="feature-cd"),
    "language-cd": dict(strategy="language-cd"),
    "commit-clr": dict(strategy="coordinated"),
    "commit": dict(strategy="coordinated", reg_enabled=True),
}
BENCH_TASKS = ("toy-qa", "toy-caption")
BOUND_SEEDS = tuple(range(20))

PRESETS = ("study-4.1", "study-4.2", "bench-6", "bound-check")


def _study(base: ExperimentConfig) -> list[ExperimentConfig]:
    return [replace(base, task="toy-qa", seed=s, strategy="constant", base_lr_S=lr_s, base_lr_T=lr_t)
            for s in SEEDS for _, lr_s, lr_t in STUDY_RATES]


def preset(name: str, output_dir: str = "runs", smoke: bool = False) -> list[ExperimentConfig]:
    """Configurations of a named experiment set.

    ``study-4.2`` reuses the study-4.1 runs: the gradient-norm series it looks at
    are logged for every run. ``smoke`` shortens every run to 10 steps.
    """
    base = ExperimentConfig(output_dir=output_dir)
    if name in ("study-4.1", "study-4.2"):
        configs = _study(base)
    elif name == "bench-6":
        configs = [replace(base, task=task, seed=s, **kw)
                   for task in BENCH_TASKS for kw in BENCH_METHODS.values() for s in SEEDS]
    elif name == "bound-check":
        configs = [replace(base, task=SYNTHETIC, seed=s, steps=500, backend="adam") for s in BOUND_SEEDS]
    else:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    if smoke:
        configs = [replace(c, steps=10, eval_cadence=5, pretrain_steps=min(c.pretrain_steps, 20))
                   for c in configs]
    for c in configs:
        c.validate()
    return configs
