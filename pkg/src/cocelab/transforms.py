"""Per-loss transforms (phi), dispersion gauges (rho), and closed-form shift solvers.

All functions accept scalars or numpy arrays and reject non-finite input
instead of propagating NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, NonFiniteError, UnsupportedStrategyError

PHI_KINDS = ("identity", "cvar", "tilt", "raw-exp")
RHO_KINDS = ("quadratic", "pseudo-huber", "abs")
THETA_KINDS = ("internal", "joint", "fixed")


def _finite(u, what="input"):
    arr = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}: {u!r}")
    return arr


def _out(arr, like):
    # hand scalars back as python floats
    return float(arr) if np.ndim(like) == 0 else arr


@dataclass(frozen=True)
class PhiTransform:
    """Convex non-decreasing loss transform.

    ``beta`` is the CVaR level, ``gamma`` the tilt for ``tilt`` and ``raw-exp``.
    """

    kind: str = "identity"
    beta: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in PHI_KINDS:
            raise ConfigError(f"unknown phi kind {self.kind!r}; expected one of {PHI_KINDS}")
        if self.kind == "cvar":
            if self.beta is None or not 0.0 < self.beta < 1.0:
                raise ConfigError(f"cvar needs beta in (0, 1), got {self.beta!r}")
        if self.kind in ("tilt", "raw-exp"):
            if self.gamma is None or not (math.isfinite(self.gamma) and self.gamma > 0):
                raise ConfigError(f"{self.kind} needs gamma > 0, got {self.gamma!r}")

    @property
    def normalized(self) -> bool:
        return self.kind != "raw-exp"

    def value(self, u):
        return phi_value(self, u)

    def derivative(self, u):
        return phi_derivative(self, u)


@dataclass(frozen=True)
class RhoFunction:
    kind: str = "pseudo-huber"

    def __post_init__(self):
        if self.kind not in RHO_KINDS:
            raise ConfigError(f"unknown rho kind {self.kind!r}; expected one of {RHO_KINDS}")

    def value(self, u):
        return rho_value(self, u)

    def derivative(self, u):
        return rho_derivative(self, u)


@dataclass(frozen=True)
class ThetaStrategy:
    """How the OCE shift is obtained: solved per batch, learned jointly, or fixed."""

    kind: str = "fixed"
    theta: float = 0.0
    # step-size multiplier for the learnable shift (joint only)
    lr_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in THETA_KINDS:
            raise ConfigError(f"unknown theta strategy {self.kind!r}; expected one of {THETA_KINDS}")
        if not math.isfinite(self.theta):
            raise ConfigError("theta must be finite")


def phi_value(t: PhiTransform, u):
    x = _finite(u)
    if t.kind == "identity":
        out = x.copy()
    elif t.kind == "cvar":
        out = np.maximum(0.0, x) / (1.0 - t.beta)
    else:
        # overflow is reported below as NonFiniteError
        with np.errstate(over="ignore"):
            out = np.expm1(t.gamma * x) / t.gamma if t.kind == "tilt" else np.exp(t.gamma * x)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"phi overflow for kind {t.kind} at {u!r}")
    return _out(out, u)


def phi_derivative(t: PhiTransform, u):
    """Exact derivative; at the cvar kink u=0 the normalized choice 1 is returned."""
    x = _finite(u)
    if t.kind == "identity":
        out = np.ones_like(x)
    elif t.kind == "cvar":
        out = np.where(x > 0, 1.0 / (1.0 - t.beta), np.where(x < 0, 0.0, 1.0))
    else:
        with np.errstate(over="ignore"):
            out = np.exp(t.gamma * x)
        if t.kind == "raw-exp":
            out = t.gamma * out
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"phi derivative overflow for kind {t.kind} at {u!r}")
    return _out(out, u)


def rho_value(r: RhoFunction, u):
    x = _finite(u)
    if r.kind == "quadratic":
        out = 0.5 * x * x
    elif r.kind == "pseudo-huber":
        # sqrt(u^2+1)-1 rewritten to avoid cancellation near 0
        out = x * x / (np.sqrt(x * x + 1.0) + 1.0)
    else:
        out = np.abs(x)
    return _out(out, u)


def rho_derivative(r: RhoFunction, u):
    x = _finite(u)
    if r.kind == "quadratic":
        out = x.copy()
    elif r.kind == "pseudo-huber":
        out = x / np.sqrt(x * x + 1.0)
    else:
        out = np.sign(x)
    return _out(out, u)


def cvar_quantile_index(beta: float, n: int) -> int:
    """0-based index ceil(beta*n)-1 into the sorted losses."""
    # round first so that e.g. 0.7*10 = 7.000000000000001 does not jump a slot
    return max(math.ceil(round(beta * n, 9)) - 1, 0)


def solve_theta_internal(t: PhiTransform, losses) -> float:
    """Closed-form minimizer of ``theta + mean(phi(loss - theta))``.

    CVaR uses the lower empirical beta-quantile; the tilted transform uses
    ``log(mean(exp(gamma * loss))) / gamma``.
    """
    x = _finite(losses, "losses").ravel()
    if x.size == 0:
        raise ValueError("cannot solve for theta on an empty loss list")
    if t.kind == "cvar":
        return float(np.sort(x)[cvar_quantile_index(t.beta, x.size)])
    if t.kind == "tilt":
        return float((logsumexp(t.gamma * x) - math.log(x.size)) / t.gamma)
    raise UnsupportedStrategyError(f"no closed-form theta for phi kind {t.kind!r}")


def theta_internal_sensitivity(t: PhiTransform, losses) -> np.ndarray:
    """d theta* / d loss_i for the closed forms above.

    Tilt gives softmax(gamma * loss); CVaR puts a unit weight on the order
    statistic selected as the quantile (ties resolved by stable sort order).
    """
    x = _finite(losses, "losses").ravel()
    if x.size == 0:
        raise ValueError("cannot solve for theta on an empty loss list")
    if t.kind == "tilt":
        z = t.gamma * x
        w = np.exp(z - z.max())
        return w / w.sum()
    if t.kind == "cvar":
        out = np.zeros_like(x)
        out[np.argsort(x, kind="stable")[cvar_quantile_index(t.beta, x.size)]] = 1.0
        return out
    raise UnsupportedStrategyError(f"no closed-form theta for phi kind {t.kind!r}")


def oce_objective(t: PhiTransform, losses, theta: float) -> float:
    """``theta + mean(phi(loss - theta))``; the inner problem solved above."""
    x = _finite(losses, "losses")
    return float(theta + np.mean(phi_value(t, x - theta)))
