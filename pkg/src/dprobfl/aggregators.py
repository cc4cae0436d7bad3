"""Robust averaging rules and empirical certification of their robustness coefficient.

Every rule maps an ``(n, d)`` array of input vectors to one ``(d,)`` vector.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .sketch import CountSketch, distortion_scan

RULES = ("krum", "trimmed_mean", "median")
MAX_ENUMERATION_N = 18


class AggregatorConfigError(ValueError):
    pass


def _as_matrix(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise AggregatorConfigError(f"expected a non-empty (n, d) array, got shape {v.shape}")
    return v


def _sq_distances(v: np.ndarray) -> np.ndarray:
    diff = v[:, None, :] - v[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum(vectors, b: int, neighbours: int | None = None) -> np.ndarray:
    """Input whose summed squared distance to its ``n - b - 2`` nearest others is smallest.

    Ties go to the lowest index.
    """
    v = _as_matrix(vectors)
    n = v.shape[0]
    if n < b + 3:
        raise AggregatorConfigError(f"krum needs n >= b + 3 (n={n}, b={b})")
    m = n - b - 2 if neighbours is None else neighbours
    dist = _sq_distances(v)
    np.fill_diagonal(dist, np.inf)
    scores = np.sort(dist, axis=1)[:, :m].sum(axis=1)
    return v[int(np.argmin(scores))].copy()


def trimmed_mean(vectors, b: int) -> np.ndarray:
    """Per coordinate, drop the ``b`` largest and ``b`` smallest values and average the rest."""
    v = _as_matrix(vectors)
    n = v.shape[0]
    if n <= 2 * b:
        raise AggregatorConfigError(f"trimmed mean needs n > 2b (n={n}, b={b})")
    if b == 0:
        return v.mean(axis=0)
    return np.sort(v, axis=0)[b : n - b].mean(axis=0)


def coordinate_median(vectors) -> np.ndarray:
    """Per-coordinate median; even ``n`` takes the midpoint of the two central values."""
    return np.median(_as_matrix(vectors), axis=0)


def nnm(vectors, b: int) -> np.ndarray:
    """Replace each vector by the mean of its ``n - b`` nearest neighbours (itself included)."""
    v = _as_matrix(vectors)
    n = v.shape[0]
    if n <= b:
        raise AggregatorConfigError(f"nearest-neighbour mixing needs n > b (n={n}, b={b})")
    dist = _sq_distances(v)
    np.fill_diagonal(dist, -1.0)  # self always first
    order = np.argsort(dist, axis=1, kind="stable")[:, : n - b]
    return v[order].mean(axis=1)


@dataclass(frozen=True)
class AggregatorSpec:
    rule: str
    b: int
    nnm: bool = False
    krum_neighbours: int | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise AggregatorConfigError(f"unknown rule {self.rule!r}; choose from {RULES}")
        if self.b < 0:
            raise AggregatorConfigError("b must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.rule}{'+nnm' if self.nnm else ''}(b={self.b})"


def aggregate(spec: AggregatorSpec, vectors) -> np.ndarray:
    v = _as_matrix(vectors)
    n = v.shape[0]
    if not 2 * spec.b < n:
        raise AggregatorConfigError(f"robust averaging requires b < n/2 (n={n}, b={spec.b})")
    if spec.nnm:
        v = nnm(v, spec.b)
    if spec.rule == "krum":
        return krum(v, spec.b, spec.krum_neighbours)
    if spec.rule == "trimmed_mean":
        return trimmed_mean(v, spec.b)
    return coordinate_median(v)


# -- robustness certification ----------------------------------------------


@dataclass(frozen=True)
class KappaCertificate:
    kappa: float
    worst_subset: tuple[int, ...]
    degenerate: bool
    lower_bound: bool = False  # True when subsets were sampled instead of enumerated


def _subsets(n: int, size: int, samples: int | None, rng) -> np.ndarray:
    if samples is None:
        return np.array(list(itertools.combinations(range(n), size)), dtype=np.int64).reshape(-1, size)
    if rng is None:
        raise AggregatorConfigError("sampled mode needs an rng")
    return np.sort(np.array([rng.choice(n, size=size, replace=False) for _ in range(samples)]), axis=1)


def subset_ratios(output, vectors, subsets):
    """Numerator ``||out - mean_S||^2`` and spread ``mean_{i in S} ||v_i - mean_S||^2`` per subset."""
    v = _as_matrix(vectors)
    members = v[subsets]  # (m, |S|, d)
    means = members.mean(axis=1)
    num = ((output - means) ** 2).sum(axis=1)
    spread = ((members - means[:, None, :]) ** 2).sum(axis=2).mean(axis=1)
    return num, spread, means


def _kappa_from(num, spread):
    """Max of num/spread with 0/0 := 0; a positive numerator over zero spread is infinite."""
    zero = spread == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(zero, np.where(num > 0, np.inf, 0.0), num / np.where(zero, 1.0, spread))
    return ratio


def empirical_kappa(
    spec: AggregatorSpec,
    vectors,
    b: int | None = None,
    *,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> KappaCertificate:
    """Smallest kappa for which the robust-averaging inequality holds on this instance.

    Enumerates every subset of size ``n - b`` (``n <= 18``).  With ``samples``
    set, draws that many random subsets instead and flags the result as a
    lower bound.
    """
    v = _as_matrix(vectors)
    n = v.shape[0]
    b = spec.b if b is None else b
    if samples is None and n > MAX_ENUMERATION_N:
        raise AggregatorConfigError(
            f"n={n} is too large to enumerate subsets (max {MAX_ENUMERATION_N}); pass samples= for sampled mode"
        )
    subsets = _subsets(n, n - b, samples, rng)
    out = aggregate(spec, v)
    num, spread, _ = subset_ratios(out, v, subsets)
    ratio = _kappa_from(num, spread)
    worst = int(np.argmax(ratio))
    return KappaCertificate(
        kappa=float(ratio[worst]),
        worst_subset=tuple(int(i) for i in subsets[worst]),
        degenerate=bool(np.all(spread == 0)),
        lower_bound=samples is not None,
    )


@dataclass(frozen=True)
class CompatibilityReport:
    """Outcome of checking a compress-aggregate-decompress pipeline against its kappa' bound.

    ``steps`` maps each proof step (a)-(e) to whether it held on every subset.
    """

    kappa_pipeline: float
    bound_rhs: float
    holds: bool
    kappa_base: float
    eps_jl: float
    spectral_sq: float
    steps: dict
    degenerate: bool


def robust_compat_check(
    spec: AggregatorSpec,
    sketch: CountSketch,
    vectors,
    b: int | None = None,
    *,
    spectral_sq: float | None = None,
    rtol: float = 1e-9,
) -> CompatibilityReport:
    """Certify ``m -> R^T Agg(R m_1..R m_n)`` against ``(1+eps)^4 kappa + e`` on this instance.

    ``kappa`` is the base rule's empirical coefficient in compressed space,
    ``eps`` the sketch's distortion over the inputs, and ``e`` the worst
    per-subset decompression term ``||R^T R m_S - m_S||^2 / spread_S``.
    ``spectral_sq`` defaults to the exact ``lambda_max(R^T R)`` from a dense
    eigensolve.
    """
    m = _as_matrix(vectors)
    n = m.shape[0]
    b = spec.b if b is None else b
    if n > MAX_ENUMERATION_N:
        raise AggregatorConfigError(f"n={n} is too large to enumerate subsets (max {MAX_ENUMERATION_N})")
    subsets = _subsets(n, n - b, None, None)
    size = n - b

    compressed = sketch.compress(m)
    agg = aggregate(spec, compressed)
    out = sketch.decompress(agg)

    base = empirical_kappa(spec, compressed, b)
    eps = distortion_scan(sketch, m)
    if spectral_sq is None:
        dense = sketch.to_dense()
        spectral_sq = float(np.linalg.eigvalsh(dense @ dense.T)[-1])

    lhs, spread, means = subset_ratios(out, m, subsets)
    recon = sketch.roundtrip(means)
    decomp_err = ((recon - means) ** 2).sum(axis=1)

    pipeline_ratio = _kappa_from(lhs, spread)
    e_ratio = _kappa_from(decomp_err, spread)
    kappa_pipeline = float(pipeline_ratio.max())
    bound_rhs = (1 + eps) ** 4 * base.kappa + float(e_ratio.max())
    degenerate = bool(np.all(spread == 0))
    if degenerate:
        # unnormalised comparison: both sides reduce to the decompression error
        holds = bool(np.all(lhs <= decomp_err * (1 + rtol) + 1e-300))
    else:
        holds = kappa_pipeline <= bound_rhs * (1 + rtol)

    # proof chain, evaluated per subset with the concrete R
    comp_members = compressed[subsets]
    comp_means = comp_members.mean(axis=1)  # equals R m_S by linearity
    t1 = ((out - recon) ** 2).sum(axis=1)
    agg_gap = ((agg - comp_means) ** 2).sum(axis=1)
    comp_spread_sum = ((comp_members - comp_means[:, None, :]) ** 2).sum(axis=(1, 2))
    orig_spread_sum = spread * size
    slack = 1 + rtol
    steps = {
        "a": bool(np.all(lhs <= (t1 + decomp_err) * slack)),
        "b": bool(np.all(t1 <= spectral_sq * agg_gap * slack)),
        "c": bool(np.all(agg_gap <= base.kappa / size * comp_spread_sum * slack + 1e-300)),
        "d": bool(np.all(comp_spread_sum <= spectral_sq * orig_spread_sum * slack)),
        "e": bool(spectral_sq**2 <= (1 + eps) ** 4 * slack),
    }
    return CompatibilityReport(
        kappa_pipeline=kappa_pipeline,
        bound_rhs=bound_rhs,
        holds=holds,
        kappa_base=base.kappa,
        eps_jl=eps,
        spectral_sq=spectral_sq,
        steps=steps,
        degenerate=degenerate,
    )
