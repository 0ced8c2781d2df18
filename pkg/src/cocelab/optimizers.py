"""SGD with momentum and step-decay schedule, plus the SAM, SharpDRO and
COCE-SGD update rules built on top of it.

Every step function takes a TrainState and returns a new one; the input
state is never modified in place.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .data import NO_STATE, Dataset, LabeledExample
from .errors import ConfigError, CrossingPreconditionError, NonFiniteError
from .objectives import ObjectiveConfig, aggregate, transformed_loss_slopes, transformed_losses
from .transforms import rho_derivative

log = logging.getLogger(__name__)

# lower clamp on |rho'| when rescaling the step size
RHO_SLOPE_FLOOR = 1e-12


@dataclass(frozen=True)
class Schedule:
    initial_lr: float = 0.03
    decay_factor: float = 0.2
    milestones: tuple = (0.3, 0.6, 0.8)
    momentum: float = 0.9

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        m = list(self.milestones)
        if any(not 0.0 < x < 1.0 for x in m) or any(a >= b for a, b in zip(m, m[1:])):
            raise ConfigError("milestones must be strictly increasing within (0, 1)")


@dataclass(frozen=True)
class SharpDROConfig:
    radius: float = 0.05
    prob_step: float = 0.01

    def __post_init__(self):
        if not (math.isfinite(self.radius) and math.isfinite(self.prob_step)):
            raise ConfigError("SharpDRO radius and prob_step must be finite")
        if self.radius < 0 or self.prob_step < 0:
            raise ConfigError("SharpDRO radius and prob_step must be non-negative")


@dataclass(frozen=True)
class TrainState:
    params: np.ndarray
    momentum_buffer: np.ndarray
    step_index: int = 0
    total_steps: int = 1
    state_probs: np.ndarray | None = None
    theta: float | None = None
    degenerate_steps: int = 0

    @classmethod
    def init(cls, params, total_steps=1, num_states=None, theta=None):
        params = np.array(params, dtype=np.float64)
        probs = None if num_states is None else np.full(num_states, 1.0 / num_states)
        return cls(params, np.zeros_like(params), 0, total_steps, probs, theta)


def _as_batch(batch) -> Dataset:
    if isinstance(batch, LabeledExample):
        return Dataset.from_examples([batch])
    if isinstance(batch, Dataset):
        return batch
    return Dataset.from_examples(batch)


def lr_at(schedule: Schedule, step_index: int, total_steps: int) -> float:
    """Initial rate times decay_factor**k, k = milestones already passed."""
    # round before ceil: 0.8 * 100 is 80.00000000000001 in binary
    k = sum(step_index >= math.ceil(round(m * total_steps, 9)) for m in schedule.milestones)
    return schedule.initial_lr * schedule.decay_factor ** k


def sgd_step(state: TrainState, grad, schedule: Schedule, lr=None, momentum=None) -> TrainState:
    """Heavy-ball step: buf <- momentum*buf + grad; params <- params - lr*buf."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient")
    if lr is None:
        lr = lr_at(schedule, state.step_index, state.total_steps)
    mu = schedule.momentum if momentum is None else momentum
    buf = mu * state.momentum_buffer + grad
    return replace(state, params=state.params - lr * buf, momentum_buffer=buf, step_index=state.step_index + 1)


def objective_grad(model, objective: ObjectiveConfig, params, batch, theta=None):
    """(losses, AggregateResult, gradient of the aggregate w.r.t. params)."""
    batch = _as_batch(batch)
    losses, vjp = model.loss_with_vjp(params, batch.X, batch.y)
    res = aggregate(objective, losses, theta=theta)
    return losses, res, vjp(res.loss_weights)


def _theta_for(state, objective):
    if objective.aggregator == "coce" and objective.theta.kind == "joint":
        return objective.theta.theta if state.theta is None else state.theta
    return None


def _advance_theta(state, new_state, objective, res, lr):
    if objective.aggregator != "coce" or objective.theta.kind != "joint":
        return new_state
    th = _theta_for(state, objective)
    return replace(new_state, theta=th - lr * objective.theta.lr_scale * res.theta_gradient)


def objective_step(state, batch, model, objective: ObjectiveConfig, schedule: Schedule) -> TrainState:
    """Plain SGD on any aggregator."""
    _, res, g = objective_grad(model, objective, state.params, batch, _theta_for(state, objective))
    lr = lr_at(schedule, state.step_index, state.total_steps)
    return _advance_theta(state, sgd_step(state, g, schedule), objective, res, lr)


def sam_step(state, batch, model, objective: ObjectiveConfig, schedule: Schedule, radius: float) -> TrainState:
    """Feed SGD the objective gradient taken at params + radius * g/|g|."""
    if radius < 0:
        raise ConfigError("SAM radius must be non-negative")
    theta = _theta_for(state, objective)
    _, res, g = objective_grad(model, objective, state.params, batch, theta)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    norm = float(np.linalg.norm(g))
    if radius > 0 and norm > 0:
        _, res, g = objective_grad(model, objective, state.params + (radius / norm) * g, batch, theta)
    lr = lr_at(schedule, state.step_index, state.total_steps)
    return _advance_theta(state, sgd_step(state, g, schedule), objective, res, lr)


def update_state_probs(probs, state_losses: dict, prob_step: float) -> np.ndarray:
    """Multiplicative-weights update p_s <- p_s exp(prob_step * L_s), renormalized.

    States missing from ``state_losses`` get L_s = 0, i.e. keep their mass.
    """
    probs = np.asarray(probs, dtype=np.float64)
    scores = np.zeros_like(probs)
    for s, v in state_losses.items():
        scores[s] = prob_step * v
    scores -= scores.max()
    q = probs * np.exp(scores)
    return q / q.sum()


def sharpdro_step(state, batch, model, schedule: Schedule, cfg: SharpDROConfig) -> TrainState:
    """Direction = batch mean gradient + probability-weighted per-state gradients
    at the point perturbed along the normalized batch gradient."""
    batch = _as_batch(batch)
    if state.state_probs is None:
        raise ConfigError("SharpDRO needs a TrainState with state probabilities")
    states = batch.states
    if np.any(states == NO_STATE):
        raise ValueError("SharpDRO needs an observed state for every example")
    num_states = state.state_probs.size
    if states.min() < 0 or states.max() >= num_states:
        raise ValueError(f"states must lie in 0..{num_states - 1}")

    n = len(batch)
    losses, vjp = model.loss_with_vjp(state.params, batch.X, batch.y)
    g_hat = vjp(np.full(n, 1.0 / n))

    present, inverse, counts = np.unique(states, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=losses)
    state_losses = {int(s): float(sums[k] / counts[k]) for k, s in enumerate(present)}
    absent = num_states - present.size
    if absent:
        log.debug("%d states absent from batch keep their probability mass", absent)
    probs = update_state_probs(state.state_probs, state_losses, cfg.prob_step)

    norm = float(np.linalg.norm(g_hat))
    point = state.params
    if cfg.radius > 0 and norm > 0:
        point = state.params + (cfg.radius / norm) * g_hat
    weights = probs[states] / counts[inverse]
    _, vjp_pert = model.loss_with_vjp(point, batch.X, batch.y)
    g_tilde = vjp_pert(weights)
    return replace(sgd_step(state, g_hat + g_tilde, schedule), state_probs=probs)


def coce_sgd_step(
    state, batch, model, objective: ObjectiveConfig, schedule: Schedule,
    prop1_scaling: bool = False, alpha0: float | None = None,
) -> TrainState:
    """SGD on the COCE aggregate.

    With ``prop1_scaling`` (batch size 1 only) the step is alpha0 / |rho'(L - eta)|
    without momentum, so the update reduces to alpha0 * sign(L - eta) * grad L.
    """
    if objective.aggregator != "coce":
        raise ConfigError("coce_sgd_step needs a coce objective")
    if not prop1_scaling:
        return objective_step(state, batch, model, objective, schedule)
    batch = _as_batch(batch)
    if len(batch) != 1:
        raise ValueError("step-size rescaling is defined for single-example batches")
    if alpha0 is None or not alpha0 > 0:
        raise ConfigError("alpha0 must be positive")
    theta = _theta_for(state, objective)
    losses, res, g = objective_grad(model, objective, state.params, batch, theta)
    big_l = transformed_losses(objective.phi, losses, res.theta_used)[0]
    slope = abs(float(rho_derivative(objective.rho, big_l - objective.eta)))
    degenerate = slope < RHO_SLOPE_FLOOR
    if degenerate:
        log.warning("rho' = %.3g at step %d; clamping, step is null", slope, state.step_index)
    lr = alpha0 / max(slope, RHO_SLOPE_FLOOR)
    new = sgd_step(state, g, schedule, lr=lr, momentum=0.0)
    if degenerate:
        new = replace(new, degenerate_steps=new.degenerate_steps + 1)
    return _advance_theta(state, new, objective, res, lr)


def transformed_loss_and_grad(model, objective: ObjectiveConfig, params, example):
    """L_phi and its parameter gradient phi'(loss - theta) * grad loss for one example."""
    batch = _as_batch(example)
    losses, vjp = model.loss_with_vjp(params, batch.X, batch.y)
    theta = objective.theta.theta
    big_l = float(transformed_losses(objective.phi, losses, theta)[0])
    return big_l, vjp(transformed_loss_slopes(objective.phi, losses, theta))


def crossing_residual(h_t, z_t, z_next, objective, model, alpha0, require_crossing=True) -> float:
    """Distance between two rescaled COCE-SGD steps and the closed-form two-step relation

        h_t - alpha0 * [r_t grad L_t(h_t) + r_t1 grad L_t1(h_t - alpha0 r_t grad L_t(h_t))]

    where r are the signs of (L - eta) at each step. With ``require_crossing``
    the pair must cross the threshold from below (r_t = -1, r_t1 = +1).
    """
    if objective.aggregator != "coce" or objective.theta.kind != "fixed":
        raise ConfigError("crossing check needs a coce objective with fixed theta")
    h_t = np.array(h_t, dtype=np.float64)
    sched = Schedule(momentum=0.0)
    s0 = TrainState.init(h_t, total_steps=2)

    l_t, grad_t = transformed_loss_and_grad(model, objective, h_t, z_t)
    r_t = int(np.sign(l_t - objective.eta))
    s1 = coce_sgd_step(s0, z_t, model, objective, sched, prop1_scaling=True, alpha0=alpha0)
    l_t1, _ = transformed_loss_and_grad(model, objective, s1.params, z_next)
    r_t1 = int(np.sign(l_t1 - objective.eta))
    if require_crossing and not (r_t == -1 and r_t1 == 1):
        raise CrossingPreconditionError(
            f"no crossing from below: L_t={l_t:.6g}, L_t+1={l_t1:.6g}, eta={objective.eta:.6g}"
        )
    s2 = coce_sgd_step(s1, z_next, model, objective, sched, prop1_scaling=True, alpha0=alpha0)

    _, grad_shift = transformed_loss_and_grad(model, objective, h_t - alpha0 * r_t * grad_t, z_next)
    predicted = h_t - alpha0 * (r_t * grad_t + r_t1 * grad_shift)
    return float(np.linalg.norm(s2.params - predicted))
