"""Byzantine attacks.

Vector-level attacks act on whatever space they are handed (the federator's
compressed space by default).  The colluding attacks (ALIE, Min-Max, Min-Sum,
FoE) read every honest vector of the current round and make all malicious
users send the same vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .tensor import Dataset

ATTACKS = ("none", "label_flip", "sign_flip", "alie", "min_max", "min_sum", "foe")
COLLUDING = ("alie", "min_max", "min_sum", "foe")
DIRECTIONS = ("std", "unit_vec", "sign")

_PARAM_KEYS = {
    "none": set(),
    "label_flip": set(),
    "sign_flip": {"scale"},
    "alie": {"z"},
    "min_max": {"direction", "gamma_max", "iters"},
    "min_sum": {"direction", "gamma_max", "iters"},
    "foe": {"epsilon"},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {ATTACKS}")
        extra = set(self.params) - _PARAM_KEYS[self.kind]
        if extra:
            raise ValueError(f"attack {self.kind!r} takes no parameters {sorted(extra)}")


def flip_labels(data: Dataset, num_classes: int) -> Dataset:
    """Map label ``y`` to ``num_classes - 1 - y``."""
    if data.y.size and (data.y.min() < 0 or data.y.max() >= num_classes):
        raise ValueError("label out of range")
    return Dataset(data.x, num_classes - 1 - data.y)


def sign_flip(update, scale: float = 1.0) -> np.ndarray:
    return -float(scale) * np.asarray(update, dtype=np.float64)


def alie_z(n: int, b: int) -> float:
    """Standard-normal quantile at ``(n - floor(n/2 + 1)) / (n - b)``."""
    return NormalDist().inv_cdf((n - (n // 2 + 1)) / (n - b))


def alie(honest, n: int, b: int, z: float | None = None) -> np.ndarray:
    """``mean - z * std`` per coordinate over the honest vectors."""
    h = np.asarray(honest, dtype=np.float64)
    if h.shape[0] < 2:
        return h.mean(axis=0)
    z = alie_z(n, b) if z is None else z
    return h.mean(axis=0) - z * h.std(axis=0)


def perturbation(honest, direction: str = "std") -> np.ndarray:
    h = np.asarray(honest, dtype=np.float64)
    if direction == "std":
        v = h.std(axis=0)
    elif direction == "unit_vec":
        v = h.mean(axis=0)
    elif direction == "sign":
        return -np.sign(h.mean(axis=0))
    else:
        raise ValueError(f"unknown perturbation direction {direction!r}")
    norm = np.linalg.norm(v)
    return -v / norm if norm > 0 else np.zeros_like(v)


def _max_distance(h, x):
    return float(np.max(np.linalg.norm(h - x, axis=1)))


def _sum_sq_distance(h, x):
    return float(np.sum((h - x) ** 2))


def _largest_gamma(feasible, gamma_max, iters):
    if feasible(gamma_max):
        return gamma_max
    lo, hi = 0.0, gamma_max
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def min_max(honest, direction="std", gamma_max: float = 2.0**16, iters: int = 50, tol: float = 1e-6):
    """Push the mean along ``direction`` while staying within the honest diameter."""
    h = np.asarray(honest, dtype=np.float64)
    mu = h.mean(axis=0)
    delta = perturbation(h, direction) if isinstance(direction, str) else np.asarray(direction, dtype=np.float64)
    diff = h[:, None, :] - h[None, :, :]
    threshold = float(np.sqrt(np.max(np.einsum("ijk,ijk->ij", diff, diff))))
    gamma = _largest_gamma(lambda g: _max_distance(h, mu + g * delta) <= threshold, gamma_max, iters)
    out = mu + gamma * delta
    assert _max_distance(h, out) <= threshold + tol, "min-max constraint violated"
    return out


def min_sum(honest, direction="std", gamma_max: float = 2.0**16, iters: int = 50, tol: float = 1e-6):
    """Push the mean along ``direction`` while its summed squared distance stays below every honest one."""
    h = np.asarray(honest, dtype=np.float64)
    mu = h.mean(axis=0)
    delta = perturbation(h, direction) if isinstance(direction, str) else np.asarray(direction, dtype=np.float64)
    diff = h[:, None, :] - h[None, :, :]
    threshold = float(np.max(np.einsum("ijk,ijk->ij", diff, diff).sum(axis=1)))
    gamma = _largest_gamma(lambda g: _sum_sq_distance(h, mu + g * delta) <= threshold, gamma_max, iters)
    out = mu + gamma * delta
    assert _sum_sq_distance(h, out) <= threshold + tol * max(1.0, threshold), "min-sum constraint violated"
    return out


def foe(honest, epsilon: float = 1.0) -> np.ndarray:
    return -float(epsilon) * np.asarray(honest, dtype=np.float64).mean(axis=0)


def craft(attack: AttackSpec, honest, own, n: int, b: int) -> np.ndarray:
    """The ``b`` malicious vectors for one round, shape ``(b, k)``.

    ``honest`` holds the current round's honest vectors; ``own`` holds what
    each malicious user's honest pipeline produced (on flipped labels for
    ``label_flip``).
    """
    honest = np.asarray(honest, dtype=np.float64)
    if b == 0:
        return np.zeros((0, honest.shape[1]))
    own = np.asarray(own, dtype=np.float64).reshape(b, -1)
    kind, prm = attack.kind, attack.params
    if kind in ("none", "label_flip"):
        return own.copy()
    if kind == "sign_flip":
        return sign_flip(own, prm.get("scale", 1.0))
    if kind == "alie":
        vec = alie(honest, n, b, prm.get("z"))
    elif kind in ("min_max", "min_sum"):
        fn = min_max if kind == "min_max" else min_sum
        vec = fn(
            honest,
            prm.get("direction", "std"),
            float(prm.get("gamma_max", 2.0**16)),
            int(prm.get("iters", 50)),
        )
    else:
        vec = foe(honest, prm.get("epsilon", 1.0))
    return np.tile(vec, (b, 1))
