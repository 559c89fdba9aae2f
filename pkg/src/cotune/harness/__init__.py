from .config import ExperimentConfig, load_config, parse, save_config, serialize
from .presets import preset
from .report import emit_report, load_run
from .runner import RunLog, run_experiment, run_many

__all__ = [
    "ExperimentConfig", "RunLog", "emit_report", "load_config", "load_run", "parse", "preset",
    "run_experiment", "run_many", "save_config", "serialize",
]
