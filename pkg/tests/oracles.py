"""Independent reference implementations used only by the tests.

Each oracle is written from the mathematical definition with plain loops or
arbitrary-precision arithmetic, sharing no code path with the package.
"""

import itertools
import math

import mpmath
import numpy as np

MASK = (1 << 64) - 1


def splitmix64_int(x):
    z = (x + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def dense_count_sketch(d, k, p, seed):
    """Materialise the Count-Sketch matrix column by column with Python integers."""
    s = k // p
    base = splitmix64_int(seed & MASK)
    out = np.zeros((k, d))
    for i in range(p):
        h_seed = splitmix64_int(base ^ (2 * i + 1))
        z_seed = splitmix64_int(base ^ (2 * i + 2))
        for col in range(d):
            row = ((splitmix64_int(col ^ h_seed) >> 32) * s) >> 32
            sign = -1.0 if splitmix64_int(col ^ z_seed) >> 63 else 1.0
            out[i * s + row, col] = sign / math.sqrt(p)
    return out


# -- privacy ----------------------------------------------------------------


def subsampled_rdp_oracle(alpha, q, sigma, dps=60):
    """Integer-order subsampled Gaussian RDP summed term by term at high precision."""
    with mpmath.workdps(dps):
        q = mpmath.mpf(q)
        sigma = mpmath.mpf(sigma)

        def eps(a):
            return mpmath.mpf(a) / (2 * sigma**2)

        second = min(4 * (mpmath.exp(eps(2)) - 1), mpmath.exp(eps(2)) * 2)
        total = 1 + q**2 * mpmath.binomial(alpha, 2) * second
        for i in range(3, alpha + 1):
            total += q**i * mpmath.binomial(alpha, i) * mpmath.exp((i - 1) * eps(i)) * 2
        return float(mpmath.log(total) / (alpha - 1))


def independent_epsilon(noise_multiplier, q, rounds, delta, orders):
    """Second accountant: high-precision integer terms, interpolation for real orders."""

    def integer(a):
        return subsampled_rdp_oracle(a, q, noise_multiplier, dps=30)

    best = math.inf
    for a in orders:
        a_eff = max(a, 2.0)
        lo, hi = math.floor(a_eff), math.ceil(a_eff)
        if lo == hi:
            per = integer(lo)
        else:
            per = ((1 - a_eff + lo) * (lo - 1) * integer(lo) + (a_eff - lo) * (hi - 1) * integer(hi)) / (a_eff - 1)
        best = min(best, rounds * per + math.log(1 / delta) / (a - 1))
    return best


def normal_quantile(p, dps=50):
    with mpmath.workdps(dps):
        return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


# -- aggregation ------------------------------------------------------------


def krum_oracle(vectors, b):
    n = len(vectors)
    m = n - b - 2
    best, best_score = None, math.inf
    for i in range(n):
        dists = sorted(float(np.sum((vectors[i] - vectors[j]) ** 2)) for j in range(n) if j != i)
        score = sum(dists[:m])
        if score < best_score:
            best, best_score = i, score
    return vectors[best]


def trimmed_mean_oracle(vectors, b):
    n, d = vectors.shape
    out = np.empty(d)
    for c in range(d):
        vals = sorted(vectors[:, c])
        kept = vals[b : n - b]
        out[c] = sum(kept) / len(kept)
    return out


def median_oracle(vectors):
    n, d = vectors.shape
    out = np.empty(d)
    for c in range(d):
        vals = sorted(vectors[:, c])
        out[c] = vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])
    return out


def nnm_oracle(vectors, b):
    n = len(vectors)
    out = []
    for i in range(n):
        order = sorted(range(n), key=lambda j: (j != i, float(np.sum((vectors[i] - vectors[j]) ** 2)), j))
        out.append(np.mean([vectors[j] for j in order[: n - b]], axis=0))
    return np.array(out)


def robust_inequality_holds(output, vectors, b, kappa, rtol=1e-9):
    """Check the robust-averaging inequality for every subset of size n - b."""
    n = len(vectors)
    for subset in itertools.combinations(range(n), n - b):
        members = vectors[list(subset)]
        mean = members.mean(axis=0)
        lhs = float(np.sum((output - mean) ** 2))
        rhs = kappa / len(subset) * float(np.sum((members - mean) ** 2))
        if lhs > rhs * (1 + rtol) + 1e-12:
            return False
    return True


# -- gradients --------------------------------------------------------------


def finite_difference(loss, params, h=1e-6):
    """Central differences of a scalar function, one coordinate at a time."""
    grad = np.empty_like(params)
    for i in range(params.size):
        up, down = params.copy(), params.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss(up) - loss(down)) / (2 * h)
    return grad


def cross_entropy_mp(architecture, input_dim, hidden_dim, num_classes, params, x, label, dps=50):
    """Single-example cross-entropy evaluated in arbitrary precision.

    Flat layout: logistic ``[W (c x f), b (c)]``; MLP ``[W1 (h x f), b1 (h), W2 (c x h), b2 (c)]``,
    weights row-major.
    """
    with mpmath.workdps(dps):
        w = [mpmath.mpf(v) for v in params]
        x = [mpmath.mpf(float(v)) for v in x]
        f, h, c = input_dim, hidden_dim, num_classes

        def affine(offset, rows, cols, inputs):
            bias = offset + rows * cols
            return [sum(w[offset + r * cols + j] * inputs[j] for j in range(cols)) + w[bias + r] for r in range(rows)]

        if architecture == "logistic":
            z = affine(0, c, f, x)
        else:
            act = [max(v, 0) for v in affine(0, h, f, x)]
            z = affine(h * f + h, c, h, act)
        return mpmath.log(sum(mpmath.exp(v) for v in z)) - z[label]


def finite_difference_mp(loss, params, h=1e-8, dps=50):
    """Central differences with the loss evaluated at ``dps`` digits, so rounding error is negligible."""
    grad = np.empty(len(params))
    with mpmath.workdps(dps):
        base = [mpmath.mpf(float(v)) for v in params]
        step = mpmath.mpf(h)
        for i in range(len(base)):
            up, down = list(base), list(base)
            up[i] += step
            down[i] -= step
            grad[i] = float((loss(up) - loss(down)) / (2 * step))
    return grad
