"""Robust-training lab: concentrated OCE objectives, SAM, SharpDRO and baselines
on small hand-differentiated classifiers over synthetic corrupted data."""

from .data import DataConfig, Dataset, LabeledExample, generate_dataset, load_csv, save_csv
from .evaluation import EvalReport, balanced_error, evaluate, max_balance_gap, per_state_expected_loss
from .models import ModelSpec, QuadraticModel, finite_diff_grad, param_norm
from .objectives import AggregateResult, ObjectiveConfig, aggregate, ascent_descent_sign
from .optimizers import (
    Schedule,
    SharpDROConfig,
    TrainState,
    coce_sgd_step,
    crossing_residual,
    lr_at,
    sam_step,
    sgd_step,
    sharpdro_step,
)
from .transforms import PhiTransform, RhoFunction, ThetaStrategy, solve_theta_internal

__version__ = "0.1.0"
