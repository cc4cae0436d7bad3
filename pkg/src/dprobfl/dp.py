"""Per-sample clipping and the Gaussian mechanism applied to minibatch gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Dataset, ModelSpec, per_sample_gradients


@dataclass(frozen=True)
class DPConfig:
    """Clip norm ``C``, noise std ``sigma_dp``, batch size and local dataset size."""

    clip_norm: float
    noise_scale: float
    batch_size: int
    dataset_size: int

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.batch_size > self.dataset_size:
            raise ValueError(f"batch size {self.batch_size} exceeds dataset size {self.dataset_size}")

    @classmethod
    def from_noise_multiplier(cls, clip_norm, noise_multiplier, batch_size, dataset_size):
        """Noise std expressed in units of the sensitivity ``2C / batch``."""
        sigma = 2.0 * clip_norm / batch_size * noise_multiplier
        return cls(clip_norm, sigma, batch_size, dataset_size)

    @property
    def sensitivity(self) -> float:
        return 2.0 * self.clip_norm / self.batch_size

    @property
    def noise_multiplier(self) -> float:
        return self.noise_scale / self.sensitivity

    @property
    def sampling_rate(self) -> float:
        return self.batch_size / self.dataset_size


def clip(g, clip_norm: float) -> np.ndarray:
    """Scale ``g`` (or each row of a 2-d array) onto the l2 ball of radius ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    g = np.asarray(g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    # identity inside the ball, exact; zero rows stay zero
    factor = np.where(norms > clip_norm, clip_norm / np.where(norms > 0, norms, 1.0), 1.0)
    return g * factor


def clipped_mean(per_sample_grads, clip_norm: float) -> np.ndarray:
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] == 0:
        raise ValueError("need a non-empty (batch, d) array of gradients")
    return clip(grads, clip_norm).mean(axis=0)


def privatize_batch(per_sample_grads, cfg: DPConfig, rng: np.random.Generator) -> np.ndarray:
    """Clip each gradient, average, and add N(0, sigma_dp^2 I) noise."""
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] == 0:
        raise ValueError("need a non-empty (batch, d) array of gradients")
    if grads.shape[0] != cfg.batch_size:
        raise ValueError(f"got {grads.shape[0]} gradients for batch size {cfg.batch_size}")
    mean = clip(grads, cfg.clip_norm).mean(axis=0)
    if cfg.noise_scale == 0:
        return mean
    return mean + cfg.noise_scale * rng.standard_normal(mean.shape[0])


def adjacent_sensitivity(spec: ModelSpec, params, batch: Dataset, neighbour: Dataset, clip_norm: float) -> float:
    """Distance between noiseless clipped-mean gradients of two minibatches."""
    g = clipped_mean(per_sample_gradients(spec, params, batch), clip_norm)
    h = clipped_mean(per_sample_gradients(spec, params, neighbour), clip_norm)
    return float(np.linalg.norm(g - h))


def sensitivity_oracle(
    spec: ModelSpec,
    params,
    dataset: Dataset,
    cfg: DPConfig,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Largest observed ``||g(B) - g(B')||`` over random adjacent minibatches.

    ``B`` is drawn without replacement; ``B'`` replaces one element of ``B`` by
    a record outside it (a duplicate record when ``B`` is the whole dataset).
    Noise is never added.  The result never exceeds ``2C / batch``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rho, batch = len(dataset), cfg.batch_size
    if batch > rho:
        raise ValueError(f"batch size {batch} exceeds dataset size {rho}")
    grads = clip(per_sample_gradients(spec, params, dataset), cfg.clip_norm)
    worst = 0.0
    for _ in range(trials):
        if batch < rho:
            idx = rng.choice(rho, size=batch + 1, replace=False)
            base, swap_in = idx[:batch], idx[batch]
        else:
            base, swap_in = rng.permutation(rho), rng.integers(rho)
        other = base.copy()
        other[rng.integers(batch)] = swap_in
        diff = grads[base].mean(axis=0) - grads[other].mean(axis=0)
        worst = max(worst, float(np.linalg.norm(diff)))
    return worst
