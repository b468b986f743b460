"""Bernoulli kl divergence, its upper/lower inverses and the split decomposition.

All functions are scalar and pure. Inverses are computed by bisection on the
side of ``p_hat`` where ``kl(p_hat || q)`` is monotone in ``q``.
"""
from __future__ import annotations

import math

__all__ = [
    "bernoulli_kl",
    "kl_inverse_upper",
    "kl_inverse_lower",
    "split_components",
    "check_probability",
    "check_budget",
]

# 100 halvings of [0, 1] reach float resolution well before the cap, so the
# returned q satisfies |kl(p_hat || q) - eps| <= 1e-9 unless kl is steeper than
# ~1e7 per unit q at the solution (q within 1e-7 of 0 or 1).
BISECTION_MAX_ITER = 100


def check_probability(value: float, name: str = "probability") -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_budget(eps: float) -> float:
    eps = float(eps)
    if not math.isfinite(eps) or eps < 0.0:
        raise ValueError(f"kl budget must be finite and nonnegative, got {eps!r}")
    return eps


def _xlogx_ratio(p: float, q: float) -> float:
    # p * ln(p / q) with 0 ln(0/x) = 0 and p > 0, q = 0 -> inf
    if p == 0.0:
        return 0.0
    if q == 0.0:
        return math.inf
    return p * math.log(p / q)


def bernoulli_kl(p_hat: float, q: float) -> float:
    """kl(p_hat || q) between Bernoulli(p_hat) and Bernoulli(q), in nats.

    Returns ``inf`` when ``q`` sits on the boundary {0, 1} and ``p_hat`` does not
    agree with it.
    """
    p_hat = check_probability(p_hat, "p_hat")
    q = check_probability(q, "q")
    value = _xlogx_ratio(p_hat, q) + _xlogx_ratio(1.0 - p_hat, 1.0 - q)
    # rounding can push the result a hair below zero near p_hat == q
    return max(value, 0.0)


def _bisect(p_hat: float, eps: float, lo: float, hi: float, upper: bool) -> float:
    # invariant: kl(p_hat || inner) <= eps < kl(p_hat || outer)
    inner, outer = (lo, hi) if upper else (hi, lo)
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (inner + outer)
        if mid == inner or mid == outer:
            break
        if bernoulli_kl(p_hat, mid) <= eps:
            inner = mid
        else:
            outer = mid
    return inner


def kl_inverse_upper(p_hat: float, eps: float) -> float:
    """Largest q in [p_hat, 1] with kl(p_hat || q) <= eps."""
    p_hat = check_probability(p_hat, "p_hat")
    eps = check_budget(eps)
    if eps == 0.0 or p_hat == 1.0:
        return p_hat
    if bernoulli_kl(p_hat, 1.0) <= eps:
        return 1.0
    return _bisect(p_hat, eps, p_hat, 1.0, upper=True)


def kl_inverse_lower(p_hat: float, eps: float) -> float:
    """Smallest q in [0, p_hat] with kl(p_hat || q) <= eps."""
    p_hat = check_probability(p_hat, "p_hat")
    eps = check_budget(eps)
    if eps == 0.0 or p_hat == 0.0:
        return p_hat
    if bernoulli_kl(p_hat, 0.0) <= eps:
        return 0.0
    return _bisect(p_hat, eps, 0.0, p_hat, upper=False)


def split_components(z: float, mu: float, a: float, b: float) -> tuple[float, float]:
    """Decompose ``z`` in [a, b] as ``mu + z_plus - z_minus`` around offset ``mu``.

    Works on any ordered field type. With ``fractions.Fraction`` inputs the
    reconstruction is exact; with floats the subtraction rounds, so
    ``mu + z_plus - z_minus`` can differ from ``z`` by one ulp when ``z`` and
    ``mu`` differ by more than a factor of two.
    """
    if not (a <= z <= b):
        raise ValueError(f"z={z!r} outside [{a}, {b}]")
    if not (a <= mu <= b):
        raise ValueError(f"mu={mu!r} outside [{a}, {b}]")
    zero = z - z
    if z >= mu:
        return z - mu, zero
    return zero, mu - z
