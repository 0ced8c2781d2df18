"""Self-checks run by ``cocelab check``: each compares a library path to an
independent numerical oracle and reports the worst observed discrepancy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .data import Dataset
from .errors import CrossingPreconditionError
from .evaluation import balanced_error
from .models import ModelSpec, QuadraticModel, finite_diff_grad
from .objectives import ObjectiveConfig, aggregate
from .optimizers import Schedule, SharpDROConfig, TrainState, crossing_residual, sharpdro_step
from .transforms import PhiTransform, RhoFunction, ThetaStrategy, oce_objective, solve_theta_internal


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} worst={self.worst:.3e}  tol={self.tolerance:.0e}"


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def check_gradients(rng, draws=40, tol=1e-5):
    objectives = [
        ObjectiveConfig.erm(),
        ObjectiveConfig.coce(PhiTransform("raw-exp", gamma=0.1), RhoFunction("pseudo-huber"), 0.3),
        ObjectiveConfig.coce(PhiTransform("tilt", gamma=0.5), RhoFunction("quadratic"), 0.5,
                             ThetaStrategy("internal")),
        ObjectiveConfig.tilted_erm(0.7),
    ]
    worst = 0.0
    for k in range(draws):
        arch = "linear" if k % 2 else "mlp"
        spec = ModelSpec(arch, 4, 3, hidden_dim=5 if arch == "mlp" else None)
        params = rng.normal(size=spec.num_params)
        X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
        obj = objectives[k % len(objectives)]

        def value(p):
            return aggregate(obj, spec.losses(p, X, y)).objective_value

        losses, vjp = spec.loss_with_vjp(params, X, y)
        analytic = vjp(aggregate(obj, losses).loss_weights)
        worst = max(worst, _rel_err(analytic, finite_diff_grad(value, params, 1e-6)))
    return CheckResult("gradients vs finite differences", worst < tol, worst, tol)


def check_crossing(rng, scenarios=50, tol=1e-10):
    obj_kw = dict(phi=PhiTransform("identity"), rho=RhoFunction("pseudo-huber"))
    worst, done = 0.0, 0
    while done < scenarios:
        dim = 1 if done % 2 else 10
        model = QuadraticModel(dim)
        h = rng.normal(size=dim)
        z0, z1 = (Dataset(rng.normal(size=(1, dim)), [0], [0]) for _ in range(2))
        alpha0 = rng.uniform(0.05, 0.5)
        l0 = model.losses(h, z0.X)[0]
        h1 = h + alpha0 * (h - z0.X[0])  # ascent step taken below the threshold
        l1 = model.losses(h1, z1.X)[0]
        if l1 <= l0:
            continue
        obj = ObjectiveConfig.coce(eta=rng.uniform(l0, l1), **obj_kw)
        try:
            worst = max(worst, crossing_residual(h, z0, z1, obj, model, alpha0))
        except CrossingPreconditionError:
            continue
        done += 1
    return CheckResult("threshold-crossing identity", worst < tol, worst, tol)


def check_theta(rng, vectors=50, tol=1e-6):
    worst = 0.0
    tilt = PhiTransform("tilt", gamma=0.5)
    cvar = PhiTransform("cvar", beta=0.7)
    for _ in range(vectors):
        losses = rng.exponential(size=int(rng.integers(2, 30)))
        lo, hi = losses.min() - 1, losses.max() + 1
        golden = minimize_scalar(lambda t: oce_objective(tilt, losses, t), bracket=(lo, hi),
                                 method="golden", tol=1e-12)
        worst = max(worst, abs(solve_theta_internal(tilt, losses) - golden.x))
        grid = np.linspace(lo, hi, 10_001)
        grid_min = min(oce_objective(cvar, losses, t) for t in grid)
        gap = oce_objective(cvar, losses, solve_theta_internal(cvar, losses)) - grid_min
        worst = max(worst, gap)
    return CheckResult("closed-form theta vs search", worst < tol, worst, tol)


def check_sharpdro(rng, steps=20, tol=1e-12):
    spec = ModelSpec("linear", 3, 2)
    state = TrainState.init(rng.normal(size=spec.num_params), total_steps=steps, num_states=4)
    worst = 0.0
    for _ in range(steps):
        batch = Dataset(rng.normal(size=(12, 3)), rng.integers(0, 2, 12), rng.integers(0, 4, 12))
        state = sharpdro_step(state, batch, spec, Schedule(), SharpDROConfig(0.05, 0.5))
        worst = max(worst, abs(state.state_probs.sum() - 1.0), -float(state.state_probs.min()))
    return CheckResult("SharpDRO probability simplex", worst < tol, worst, tol)


def check_balanced_error(rng, sets=50):
    spec = ModelSpec("linear", 3, 3)
    worst = 0.0
    for _ in range(sets):
        n = int(rng.integers(3, 50))
        ds = Dataset(rng.normal(size=(n, 3)), rng.integers(0, 3, n), rng.integers(0, 4, n))
        params = rng.normal(size=spec.num_params)
        rates = []
        for s in sorted(set(ds.states.tolist())):
            members = [i for i in range(n) if ds.states[i] == s]
            wrong = sum(spec.predict(params, ds.X[i]) != ds.y[i] for i in members)
            rates.append(wrong / len(members))
        worst = max(worst, abs(balanced_error(spec, params, ds) - sum(rates) / len(rates)))
    return CheckResult("balanced error vs enumeration", worst <= 1e-15, worst, 1e-15)


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    return [
        check_gradients(rng),
        check_crossing(rng),
        check_theta(rng),
        check_sharpdro(rng),
        check_balanced_error(rng),
    ]
