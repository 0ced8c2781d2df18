"""Loss aggregators returning a scalar objective plus d(objective)/d(loss_i).

Models only need to supply per-example losses and a vector-Jacobian product;
any aggregator below then composes with any model by the chain rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, NonFiniteError, UnsupportedStrategyError
from .transforms import (
    PhiTransform,
    RhoFunction,
    ThetaStrategy,
    phi_derivative,
    phi_value,
    rho_derivative,
    rho_value,
    solve_theta_internal,
    theta_internal_sensitivity,
)

AGGREGATORS = ("erm", "coce", "flooding", "tilted-erm")


@dataclass(frozen=True)
class ObjectiveConfig:
    aggregator: str = "erm"
    phi: PhiTransform | None = None
    rho: RhoFunction | None = None
    eta: float | None = None
    theta: ThetaStrategy | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.aggregator == "coce":
            missing = [k for k in ("phi", "rho", "eta", "theta") if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"coce objective is missing {', '.join(missing)}")
            if self.theta.kind == "internal" and self.phi.kind not in ("cvar", "tilt"):
                raise UnsupportedStrategyError(
                    f"internal theta needs a closed form; phi kind {self.phi.kind!r} has none"
                )
            if self.phi.kind == "raw-exp" and self.theta.kind != "fixed":
                raise UnsupportedStrategyError("raw-exp transform takes no shift; use a fixed theta")
        if self.aggregator == "flooding" and self.eta is None:
            raise ConfigError("flooding objective needs eta")
        if self.aggregator == "tilted-erm":
            if self.gamma is None or not self.gamma > 0:
                raise ConfigError("tilted-erm objective needs gamma > 0")
        if self.eta is not None and not math.isfinite(self.eta):
            raise ConfigError("eta must be finite")

    @classmethod
    def erm(cls):
        return cls("erm")

    @classmethod
    def coce(cls, phi, rho, eta, theta=None):
        return cls("coce", phi=phi, rho=rho, eta=eta, theta=theta or ThetaStrategy("fixed", 0.0))

    @classmethod
    def softad(cls, eta, rho=None):
        return cls.coce(PhiTransform("identity"), rho or RhoFunction("pseudo-huber"), eta)

    @classmethod
    def flooding(cls, eta):
        return cls("flooding", eta=eta)

    @classmethod
    def tilted_erm(cls, gamma):
        return cls("tilted-erm", gamma=gamma)


@dataclass
class AggregateResult:
    objective_value: float
    loss_weights: np.ndarray
    theta_used: float | None = None
    theta_gradient: float | None = None


def transformed_losses(phi: PhiTransform, losses, theta: float = 0.0):
    """``theta + phi(loss - theta)``, or ``exp(gamma * loss)`` for raw-exp."""
    x = np.asarray(losses, dtype=np.float64)
    if phi.kind == "raw-exp":
        return phi_value(phi, x)
    return theta + phi_value(phi, x - theta)


def transformed_loss_slopes(phi: PhiTransform, losses, theta: float = 0.0):
    x = np.asarray(losses, dtype=np.float64)
    if phi.kind == "raw-exp":
        return phi_derivative(phi, x)
    return phi_derivative(phi, x - theta)


def aggregate(cfg: ObjectiveConfig, losses, theta: float | None = None) -> AggregateResult:
    """Aggregate a batch of per-example losses.

    ``theta`` overrides the configured shift; the trainer passes the current
    learnable value here under the joint strategy.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot aggregate an empty batch")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("non-finite loss in batch")
    n = x.size

    if cfg.aggregator == "erm":
        return AggregateResult(float(np.mean(x)), np.full(n, 1.0 / n))

    if cfg.aggregator == "flooding":
        gap = float(np.mean(x)) - cfg.eta
        return AggregateResult(abs(gap), np.full(n, float(np.sign(gap)) / n))

    if cfg.aggregator == "tilted-erm":
        z = cfg.gamma * x
        value = (logsumexp(z) - math.log(n)) / cfg.gamma
        weights = softmax(z)
        if not (math.isfinite(value) and np.all(np.isfinite(weights))):
            raise NonFiniteError("tilted-erm overflow")
        return AggregateResult(float(value), weights)

    strategy = cfg.theta
    if strategy.kind == "internal":
        th = solve_theta_internal(cfg.phi, x)
    else:
        th = strategy.theta if theta is None else float(theta)
    big_l = transformed_losses(cfg.phi, x, th)
    dev = big_l - cfg.eta
    rho_slope = rho_derivative(cfg.rho, dev)
    phi_slope = transformed_loss_slopes(cfg.phi, x, th)
    weights = rho_slope * phi_slope / n
    # d(objective)/d(theta), holding the losses fixed
    theta_slope = float(np.mean(rho_slope * (1.0 - phi_slope)))
    theta_grad = None
    if strategy.kind == "internal":
        # theta* moves with the losses; the outer rho does not share the inner
        # problem's stationarity, so this term does not vanish
        weights = weights + theta_slope * theta_internal_sensitivity(cfg.phi, x)
    elif strategy.kind == "joint":
        theta_grad = theta_slope
    value = float(np.mean(rho_value(cfg.rho, dev)))
    if not (math.isfinite(value) and np.all(np.isfinite(weights))):
        raise NonFiniteError("coce objective overflow")
    return AggregateResult(value, weights, theta_used=th, theta_gradient=theta_grad)


def ascent_descent_sign(cfg: ObjectiveConfig, transformed_loss: float) -> int:
    """Sign of (transformed loss - eta): -1 ascent, +1 descent, 0 on the threshold."""
    if cfg.aggregator != "coce":
        raise ConfigError("ascent/descent sign is defined for coce objectives only")
    return int(np.sign(transformed_loss - cfg.eta))
