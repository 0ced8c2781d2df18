"""Small classifiers with hand-written gradients.

Parameters are a single flat float64 vector. Layout, layer by layer, is the
row-major weight matrix followed by the bias:

    linear: W (C, d), b (C,)
    mlp:    W1 (H, d), b1 (H,), W2 (C, H), b2 (C,)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    num_classes: int
    hidden_dim: int | None = None

    def __post_init__(self):
        if self.architecture not in ("linear", "mlp"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigError("need input_dim >= 1 and num_classes >= 2")
        if self.architecture == "mlp" and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ConfigError("mlp needs a positive hidden_dim")

    def layout(self):
        """(name, shape) for each block of the flat vector, in order."""
        d, c = self.input_dim, self.num_classes
        if self.architecture == "linear":
            return [("W", (c, d)), ("b", (c,))]
        h = self.hidden_dim
        return [("W1", (h, d)), ("b1", (h,)), ("W2", (c, h)), ("b2", (c,))]

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())

    def unpack(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {params.shape}")
        blocks, start = [], 0
        for _, shape in self.layout():
            size = math.prod(shape)
            blocks.append(params[start:start + size].reshape(shape))
            start += size
        return blocks

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform in +-1/sqrt(fan_in), weights and bias of each layer alike."""
        chunks = []
        fan_in = self.input_dim
        for name, shape in self.layout():
            bound = 1.0 / math.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=math.prod(shape)))
            if name.startswith("b"):
                fan_in = shape[0]
        return np.concatenate(chunks)

    def _check_inputs(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected features of width {self.input_dim}, got shape {X.shape}")
        if y is None:
            return X, None
        y = np.asarray(y, dtype=np.int64).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError("features and labels differ in length")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return X, y

    def _forward(self, params, X):
        blocks = self.unpack(params)
        if self.architecture == "linear":
            W, b = blocks
            logits = X @ W.T + b
            cache = None
        else:
            W1, b1, W2, b2 = blocks
            z1 = X @ W1.T + b1
            a1 = np.maximum(z1, 0.0)
            logits = a1 @ W2.T + b2
            cache = (z1, a1)
        if not np.all(np.isfinite(logits)):
            raise NonFiniteError("non-finite logits")
        return logits, cache

    def logits(self, params, X):
        X, _ = self._check_inputs(X)
        return self._forward(params, X)[0]

    def predict(self, params, X):
        """Argmax class; ties go to the lowest index. Returns an int for a single vector."""
        single = np.ndim(X) == 1
        out = np.argmax(self.logits(params, X), axis=1)
        return int(out[0]) if single else out

    def losses(self, params, X, y):
        X, y = self._check_inputs(X, y)
        logits, _ = self._forward(params, X)
        return -_log_softmax(logits)[np.arange(y.size), y]

    def loss_with_vjp(self, params, X, y):
        """Cross-entropy losses and a function mapping loss weights to sum_i w_i grad_i."""
        X, y = self._check_inputs(X, y)
        logits, cache = self._forward(params, X)
        logp = _log_softmax(logits)
        rows = np.arange(y.size)
        losses = -logp[rows, y]
        dlogits = np.exp(logp)
        dlogits[rows, y] -= 1.0

        def vjp(weights):
            g = dlogits * np.asarray(weights, dtype=np.float64)[:, None]
            if self.architecture == "linear":
                return np.concatenate([(g.T @ X).ravel(), g.sum(axis=0)])
            z1, a1 = cache
            W2 = self.unpack(params)[2]
            dz1 = (g @ W2) * (z1 > 0)
            return np.concatenate([
                (dz1.T @ X).ravel(), dz1.sum(axis=0), (g.T @ a1).ravel(), g.sum(axis=0),
            ])

        return losses, vjp

    def per_example_loss_and_grad(self, params, X, y):
        """Losses (n,) and per-example gradients (n, num_params)."""
        X, y = self._check_inputs(X, y)
        logits, cache = self._forward(params, X)
        logp = _log_softmax(logits)
        rows = np.arange(y.size)
        losses = -logp[rows, y]
        g = np.exp(logp)
        g[rows, y] -= 1.0
        n = y.size
        if self.architecture == "linear":
            grads = np.concatenate([np.einsum("nc,nd->ncd", g, X).reshape(n, -1), g], axis=1)
        else:
            z1, a1 = cache
            W2 = self.unpack(params)[2]
            dz1 = (g @ W2) * (z1 > 0)
            grads = np.concatenate([
                np.einsum("nh,nd->nhd", dz1, X).reshape(n, -1), dz1,
                np.einsum("nc,nh->nch", g, a1).reshape(n, -1), g,
            ], axis=1)
        return losses, grads


@dataclass(frozen=True)
class QuadraticModel:
    """Test problem ``loss(h; x) = 0.5 * sum_j c_j (h_j - x_j)^2``; labels are ignored.

    Exposes the same interface as ModelSpec so it can drive the optimizers.
    """

    dim: int
    curvature: tuple | None = None

    @property
    def num_params(self) -> int:
        return self.dim

    def _c(self):
        return np.ones(self.dim) if self.curvature is None else np.asarray(self.curvature, dtype=np.float64)

    def _X(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected width {self.dim}, got {X.shape}")
        return X

    def losses(self, params, X, y=None):
        diff = np.asarray(params, dtype=np.float64) - self._X(X)
        return 0.5 * (self._c() * diff * diff).sum(axis=1)

    def loss_with_vjp(self, params, X, y=None):
        diff = np.asarray(params, dtype=np.float64) - self._X(X)
        grads = self._c() * diff
        return 0.5 * (grads * diff).sum(axis=1), lambda w: np.asarray(w, dtype=np.float64) @ grads

    def per_example_loss_and_grad(self, params, X, y=None):
        diff = np.asarray(params, dtype=np.float64) - self._X(X)
        grads = self._c() * diff
        return 0.5 * (grads * diff).sum(axis=1), grads


def finite_diff_grad(loss_fn, params, step: float = 1e-6) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function."""
    if not step > 0:
        raise ValueError("step must be positive")
    p = np.array(params, dtype=np.float64)
    out = np.empty_like(p)
    for j in range(p.size):
        orig = p[j]
        p[j] = orig + step
        up = loss_fn(p)
        p[j] = orig - step
        down = loss_fn(p)
        p[j] = orig
        out[j] = (up - down) / (2.0 * step)
    return out


def param_norm(params) -> float:
    return float(np.linalg.norm(np.asarray(params, dtype=np.float64)))
