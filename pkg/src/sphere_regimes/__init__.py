"""Projected SGD on spheres of scale-invariant objectives, with effective learning
rate bookkeeping and training-regime classification."""
from .core import (DegeneratePointError, ElrReport, GroupedParams, GroupLayout, check_scale_invariance,
                   compute_elr_report, elr_report_from_norms, predict_next_elr, project_to_sphere,
                   random_on_sphere)
from .toy import ToySystem, oracle_for
from .net import SiMlp, SiMlpSpec, build_si_mlp
from .optim import OptimizerConfig, Schedule, projected_sgd_step
from .instrument import R1, R2, R3, UNDETERMINED, classify_regime

from .config import ConfigError, RunConfig, parse_grid, toy_config
from .runner import fine_tune, run, sweep

__version__ = "0.1.0"
