"""Flat-vector models with analytic per-sample gradients.

Parameters of every model live in one flat float64 vector; layer weights are
views into index ranges of that vector.  Two architectures are supported:

* ``logistic``: multinomial logistic regression, ``W (C x F)`` then ``b (C)``.
* ``mlp2``: one hidden ReLU layer, ``W1 (H x F), b1 (H), W2 (C x H), b2 (C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ARCHITECTURES = ("logistic", "mlp2")


class DimensionError(ValueError):
    """Raised when vector or dataset shapes disagree with a model."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream...)``.

    The same key always yields the same draw sequence; different stream keys
    yield statistically independent sequences.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Dataset:
    """Features ``x`` (N x F, float64) and integer labels ``y`` (N,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2:
            raise DimensionError(f"features must be 2-d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DimensionError(f"labels shape {y.shape} does not match {x.shape[0]} examples")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_features(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    hidden_dim: int = 0
    num_classes: int = 2

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.architecture == "logistic" and self.hidden_dim != 0:
            raise ValueError("logistic model takes hidden_dim = 0")
        if self.architecture == "mlp2" and self.hidden_dim < 1:
            raise ValueError("mlp2 needs hidden_dim >= 1")

    @property
    def num_params(self) -> int:
        f, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.architecture == "logistic":
            return c * f + c
        return h * f + h + c * h + c

    def unpack(self, params: np.ndarray):
        """Split a flat vector into weight/bias views (no copies)."""
        params = np.asarray(params)
        if params.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} parameters, got shape {params.shape}")
        f, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.architecture == "logistic":
            return params[: c * f].reshape(c, f), params[c * f :]
        o = 0
        w1 = params[o : o + h * f].reshape(h, f)
        o += h * f
        b1 = params[o : o + h]
        o += h
        w2 = params[o : o + c * h].reshape(c, h)
        o += c * h
        b2 = params[o : o + c]
        return w1, b1, w2, b2


def init_params(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zeros for logistic regression; He-scaled weights for the MLP."""
    params = np.zeros(spec.num_params)
    if spec.architecture == "mlp2":
        if rng is None:
            raise ValueError("mlp2 initialisation needs an rng")
        w1, _, w2, _ = spec.unpack(params)
        w1[...] = rng.standard_normal(w1.shape) * np.sqrt(2.0 / spec.input_dim)
        w2[...] = rng.standard_normal(w2.shape) * np.sqrt(2.0 / spec.hidden_dim)
    return params


def _check_data(spec: ModelSpec, x: np.ndarray, y: np.ndarray):
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected features of width {spec.input_dim}, got shape {x.shape}")
    if x.shape[0] == 0:
        raise DimensionError("empty batch")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise DimensionError("label out of range")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    if spec.architecture == "logistic":
        w, b = spec.unpack(params)
        return x @ w.T + b, None
    w1, b1, w2, b2 = spec.unpack(params)
    pre = x @ w1.T + b1
    act = np.maximum(pre, 0.0)
    return act @ w2.T + b2, (pre, act)


def logits(spec: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    _check_data(spec, data.x, data.y)
    return _forward(spec, params, data.x)[0]


def per_example_loss(spec: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    """Cross-entropy of each example, shape (N,)."""
    out = logits(spec, params, data)
    return -_log_softmax(out)[np.arange(len(data)), data.y]


def per_sample_gradients(spec: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    """Exact gradient of each example's cross-entropy, shape (N, d)."""
    x, y = data.x, data.y
    _check_data(spec, x, y)
    out, cache = _forward(spec, params, x)
    n = x.shape[0]
    delta = np.exp(_log_softmax(out))
    delta[np.arange(n), y] -= 1.0

    grads = np.empty((n, spec.num_params))
    c, f, h = spec.num_classes, spec.input_dim, spec.hidden_dim
    if spec.architecture == "logistic":
        grads[:, : c * f] = (delta[:, :, None] * x[:, None, :]).reshape(n, c * f)
        grads[:, c * f :] = delta
        return grads

    pre, act = cache
    _, _, w2, _ = spec.unpack(params)
    # ReLU'(0) := 0
    dpre = (delta @ w2) * (pre > 0)
    o = 0
    grads[:, o : o + h * f] = (dpre[:, :, None] * x[:, None, :]).reshape(n, h * f)
    o += h * f
    grads[:, o : o + h] = dpre
    o += h
    grads[:, o : o + c * h] = (delta[:, :, None] * act[:, None, :]).reshape(n, c * h)
    o += c * h
    grads[:, o:] = delta
    return grads


def loss_and_accuracy(spec: ModelSpec, params: np.ndarray, data: Dataset) -> tuple[float, float]:
    out = logits(spec, params, data)
    loss = -_log_softmax(out)[np.arange(len(data)), data.y]
    acc = np.mean(out.argmax(axis=1) == data.y)
    return float(loss.mean()), float(acc)


# -- vector helpers ---------------------------------------------------------


def _same_length(u, v):
    if np.shape(u) != np.shape(v):
        raise DimensionError(f"length mismatch: {np.shape(u)} vs {np.shape(v)}")


def add(u, v) -> np.ndarray:
    _same_length(u, v)
    return np.asarray(u, dtype=np.float64) + np.asarray(v, dtype=np.float64)


def scale(v, a: float) -> np.ndarray:
    return float(a) * np.asarray(v, dtype=np.float64)


def dot(u, v) -> float:
    _same_length(u, v)
    return float(np.dot(u, v))


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v, v)))


def coordinate(v, i: int) -> float:
    return float(np.asarray(v)[i])
