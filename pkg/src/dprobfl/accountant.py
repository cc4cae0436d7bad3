"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Per-round guarantees come from the Gaussian mechanism's RDP curve, amplified
by sampling a fixed-size minibatch without replacement; rounds compose
additively and the composed curve is converted to an (epsilon, delta) pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)

LOG2 = math.log(2.0)


class UnreachableTarget(RuntimeError):
    """No noise level inside the search bracket meets the privacy target."""


def gaussian_rdp(alpha: float, sensitivity: float, sigma: float) -> float:
    """RDP of the Gaussian mechanism: ``sensitivity^2 * alpha / (2 sigma^2)``.

    ``sigma == 0`` means no privacy and returns ``math.inf``.
    """
    if alpha <= 1:
        raise ValueError("RDP order must exceed 1")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if math.isinf(alpha) or sigma == 0:
        return math.inf
    return sensitivity**2 * alpha / (2.0 * sigma**2)


def _log_binom(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _log_expm1(x: float) -> float:
    if x == math.inf:
        return math.inf
    if x <= 0:
        return -math.inf
    return x + math.log1p(-math.exp(-x)) if x > 1 else math.log(math.expm1(x))


def _logsumexp(xs: Sequence[float]) -> float:
    m = max(xs)
    if m == -math.inf:
        return -math.inf
    top = xs.index(m)
    # log1p keeps relative precision when the other terms are tiny next to the max
    return m + math.log1p(sum(math.exp(x - m) for i, x in enumerate(xs) if i != top))


def subsampled_rdp_integer(alpha: int, q: float, base: Callable[[float], float]) -> float:
    """RDP at integer order ``alpha`` after sampling a ``q`` fraction without replacement.

    ``base(order)`` returns the unsubsampled mechanism's RDP; it is queried at
    orders ``2..alpha`` and at ``math.inf``.  All sums run in log space.
    """
    if int(alpha) != alpha or alpha < 2:
        raise ValueError(f"integer order >= 2 required, got {alpha}")
    if not 0 <= q <= 1:
        raise ValueError("sampling rate must lie in [0, 1]")
    alpha = int(alpha)
    if q == 0:
        return 0.0
    log_q = math.log(q)
    eps_inf = base(math.inf)
    log_gap_inf = _log_expm1(eps_inf)

    def log_min2(power):
        # log of min{2, (e^{eps(inf)} - 1)^power}; resolves to log 2 for the Gaussian
        return min(LOG2, power * log_gap_inf) if log_gap_inf != -math.inf else -math.inf

    eps2 = base(2)
    log_second = min(math.log(4.0) + _log_expm1(eps2), eps2 + log_min2(2))
    terms = [0.0, 2 * log_q + _log_binom(alpha, 2) + log_second]
    for i in range(3, alpha + 1):
        terms.append(i * log_q + _log_binom(alpha, i) + (i - 1) * base(i) + log_min2(i))
    return _logsumexp(terms) / (alpha - 1)


def subsampled_rdp_real(alpha: float, q: float, base: Callable[[float], float]) -> float:
    """Interpolate the integer-order bound to a real order ``alpha > 1``."""
    if alpha <= 1:
        raise ValueError("RDP order must exceed 1")
    lo, hi = math.floor(alpha), math.ceil(alpha)
    if lo < 2:
        raise ValueError(f"order {alpha} has floor below 2")
    if lo == hi:
        return subsampled_rdp_integer(lo, q, base)
    w_lo = (1 - alpha + lo) * (lo - 1) / (alpha - 1)
    w_hi = (alpha - lo) * (hi - 1) / (alpha - 1)
    return w_lo * subsampled_rdp_integer(lo, q, base) + w_hi * subsampled_rdp_integer(hi, q, base)


@dataclass(frozen=True)
class RDPCurve:
    orders: tuple[float, ...]
    epsilons: tuple[float, ...]

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        eps = tuple(float(e) for e in self.epsilons)
        if len(orders) != len(eps) or not orders:
            raise ValueError("orders and epsilons must be non-empty and of equal length")
        if any(a <= 1 for a in orders) or any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("orders must be > 1 and strictly increasing")
        if any(not (0 <= e < math.inf) for e in eps):
            raise ValueError("epsilons must be finite and non-negative")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "epsilons", eps)

    def scaled(self, factor: float) -> "RDPCurve":
        return RDPCurve(self.orders, tuple(factor * e for e in self.epsilons))


@dataclass
class RDPLedger:
    """Per-round curve plus the number of rounds composed so far.

    ``per_round=None`` stands for a release without noise: any composed
    round makes epsilon infinite.
    """

    per_round: RDPCurve | None
    rounds: int = field(default=0)

    def step(self, count: int = 1) -> None:
        if count < 0:
            raise ValueError("cannot compose a negative number of rounds")
        self.rounds += count

    @property
    def curve(self) -> RDPCurve | None:
        return None if self.per_round is None else self.per_round.scaled(self.rounds)

    def epsilon(self, delta: float) -> float:
        if self.rounds == 0:
            return 0.0
        if self.per_round is None:
            return math.inf
        return rdp_to_dp(self.curve, delta)[0]


def subsampled_gaussian_curve(q: float, noise_multiplier: float, orders=DEFAULT_ORDERS) -> RDPCurve:
    """Per-round curve for noise ``noise_multiplier * sensitivity`` at sampling rate ``q``.

    ``q == 1`` uses the plain Gaussian curve.  Orders in (1, 2) reuse the
    order-2 value, which is valid because RDP is nondecreasing in the order.
    """
    if noise_multiplier <= 0:
        raise ValueError("noise multiplier must be positive; use RDPLedger(None) for no noise")

    def base(a):
        return gaussian_rdp(a, 1.0, noise_multiplier)

    eps = []
    for a in orders:
        if q >= 1:
            eps.append(base(a))
        else:
            eps.append(subsampled_rdp_real(max(a, 2.0), q, base))
    return RDPCurve(tuple(orders), tuple(eps))


def rdp_to_dp(curve: RDPCurve, delta: float) -> tuple[float, float]:
    """Best ``eps_rdp(a) + log(1/delta) / (a - 1)`` over the curve and its order."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    log_inv = math.log(1.0 / delta)
    values = [e + log_inv / (a - 1) for a, e in zip(curve.orders, curve.epsilons)]
    best = int(np.argmin(values))
    return values[best], curve.orders[best]


def epsilon_for(noise_multiplier, q, rounds, delta, orders=DEFAULT_ORDERS) -> tuple[float, float]:
    if rounds == 0:
        return 0.0, orders[0]
    curve = subsampled_gaussian_curve(q, noise_multiplier, orders).scaled(rounds)
    return rdp_to_dp(curve, delta)


def calibrate_sigma(
    target_eps: float,
    delta: float,
    q: float,
    rounds: int,
    sensitivity: float,
    orders=DEFAULT_ORDERS,
    rel_tol: float = 1e-3,
    bracket: tuple[float, float] = (1e-2, 1e4),
) -> float:
    """Smallest noise std (to ``rel_tol``) whose composed epsilon is <= ``target_eps``.

    ``bracket`` is given in noise-multiplier units.  If even the lower end
    satisfies the target it is returned as is.
    """
    if target_eps <= 0:
        raise ValueError("target epsilon must be positive")

    def eps(mult):
        return epsilon_for(mult, q, rounds, delta, orders)[0]

    lo, hi = bracket
    if eps(hi) > target_eps:
        raise UnreachableTarget(f"epsilon {target_eps} not reachable with noise multiplier <= {hi}")
    if eps(lo) <= target_eps:
        return lo * sensitivity
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi * sensitivity
