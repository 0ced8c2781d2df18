"""Balanced and average metrics over state-labelled evaluation sets.

Averages over states run over the states actually present in the set, not
the nominal range 0..s_max.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import NO_STATE, Dataset
from .models import param_norm

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    average_accuracy: float
    average_loss: float
    param_l2: float
    balanced_accuracy: float | None = None
    max_balance_gap: float | None = None
    per_state_loss: dict = field(default_factory=dict)
    per_state_error: dict = field(default_factory=dict)

    def metrics(self):
        """Flat (name, value) pairs in a stable order, for CSV output."""
        out = [
            ("average_accuracy", self.average_accuracy),
            ("average_loss", self.average_loss),
            ("param_l2", self.param_l2),
        ]
        if self.balanced_accuracy is not None:
            out.append(("balanced_accuracy", self.balanced_accuracy))
            out.append(("max_balance_gap", self.max_balance_gap))
        for s in sorted(self.per_state_loss):
            out.append((f"state{s}_loss", self.per_state_loss[s]))
        for s in sorted(self.per_state_error):
            out.append((f"state{s}_error", self.per_state_error[s]))
        return out


def _require_states(dataset: Dataset):
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    if not dataset.has_states:
        raise ValueError("every example needs a state for balanced metrics")


def per_state_mean(values, states) -> dict:
    values = np.asarray(values, dtype=np.float64)
    return {int(s): float(values[states == s].mean()) for s in np.unique(states) if s != NO_STATE}


def per_state_expected_loss(model, params, dataset: Dataset, base_loss=None) -> dict:
    """Mean base loss within each observed state (cross-entropy unless ``base_loss`` given)."""
    _require_states(dataset)
    if base_loss is None:
        losses = model.losses(params, dataset.X, dataset.y)
    else:
        losses = base_loss(params, dataset)
    return per_state_mean(losses, dataset.states)


def balanced_error(model, params, dataset: Dataset) -> float:
    _require_states(dataset)
    wrong = model.predict(params, dataset.X) != dataset.y
    rates = per_state_mean(wrong, dataset.states)
    return float(np.mean(list(rates.values())))


def max_balance_gap(per_state: dict) -> float:
    if not per_state:
        raise ValueError("max-balance gap of an empty map")
    vals = np.array(list(per_state.values()), dtype=np.float64)
    # max >= mean always; clip the rounding-level negatives
    return max(float(vals.max() - vals.mean()), 0.0)


def evaluate(model, params, dataset: Dataset, s_max: int | None = None) -> EvalReport:
    losses = model.losses(params, dataset.X, dataset.y)
    wrong = (model.predict(params, dataset.X) != dataset.y).astype(np.float64)
    report = EvalReport(
        average_accuracy=float(1.0 - wrong.mean()),
        average_loss=float(losses.mean()),
        param_l2=param_norm(params),
    )
    if len(dataset) and dataset.has_states:
        report.per_state_loss = per_state_mean(losses, dataset.states)
        report.per_state_error = per_state_mean(wrong, dataset.states)
        report.balanced_accuracy = float(1.0 - np.mean(list(report.per_state_error.values())))
        report.max_balance_gap = max_balance_gap(report.per_state_loss)
        if s_max is not None and len(report.per_state_error) < s_max + 1:
            log.info(
                "balanced metrics averaged over %d observed of %d nominal states",
                len(report.per_state_error), s_max + 1,
            )
    return report
