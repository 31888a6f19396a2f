"""Learning from crowds with annotator- and instance-dependent transition matrices."""

from .config import ExperimentConfig
from .pipeline import run_ablation, run_methods, run_pipeline

__all__ = ["ExperimentConfig", "run_ablation", "run_methods", "run_pipeline"]
__version__ = "0.1.0"
