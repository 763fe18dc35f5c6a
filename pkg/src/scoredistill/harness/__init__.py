from .config import ConfigError, ExperimentConfig
from .evaluation import RoundTripReport, calibrate, eps_cosine, round_trip
from .report import ReportError, report
from .runs import RunAborted, RunRecord, run_2d_distillation, run_3d_toy

__all__ = [
    "ConfigError", "ExperimentConfig", "ReportError", "RoundTripReport", "RunAborted", "RunRecord",
    "calibrate", "eps_cosine", "report", "round_trip", "run_2d_distillation", "run_3d_toy",
]
