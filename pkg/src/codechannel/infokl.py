"""Binary KL divergence, its closed-form lower-bound relaxations, and the
numerical inversion that turns a gap value into an upper bound on an event
probability.

Conventions: probabilities and divergences are 64-bit floats in nats,
0*log(0/x) = 0, and a divergence against a degenerate reference (q in {0,1}
with p != q) is reported as math.inf rather than raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .validation import check_probability, check_positive

# Upper end of the bisection interval; the divergence blows up at p = 1 when
# q < 1, so the root search stays strictly inside the unit interval.
_BISECT_HI = 1.0 - 1e-12


def d_bin(p: float, q: float) -> float:
    """KL divergence between Bernoulli(p) and Bernoulli(q), in nats.

    Evaluated as p*(log p - log q) + (1-p)*(log1p(-p) - log1p(-q)) so the
    two log terms cancel smoothly as p -> q instead of losing precision in
    the ratio p/q.
    """
    p = check_probability(p, "p")
    q = check_probability(q, "q")
    if p == q:
        return 0.0
    if q == 0.0 or q == 1.0:
        return math.inf
    if p == 0.0:
        return -math.log1p(-q)
    if p == 1.0:
        return -math.log(q)
    return p * (math.log(p) - math.log(q)) + (1.0 - p) * (
        math.log1p(-p) - math.log1p(-q)
    )


def pinsker_upper(q: float, gap: float) -> float:
    """Pinsker relaxation: event probability <= q + sqrt(gap/2), clamped to 1."""
    q = check_probability(q, "q")
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    return min(1.0, q + math.sqrt(gap / 2.0))


def bretagnolle_huber_upper(q: float, gap: float) -> float:
    """Bretagnolle-Huber relaxation: q + sqrt(1 - exp(-gap)), clamped to 1.

    Tighter than Pinsker once the gap exceeds 2*log(2); never exceeds q + 1.
    """
    q = check_probability(q, "q")
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    return min(1.0, q + math.sqrt(-math.expm1(-gap)))


@dataclass(frozen=True)
class BoundInversion:
    """Result of inverting d_bin(. || q) = gap on the upper branch.

    When the gap exceeds -log(q) no root exists below 1; p_star is then 1.0
    and the inversion is flagged vacuous.
    """

    reference_rate: float
    gap: float
    tolerance: float
    p_star: float
    vacuous: bool


def invert_bound(q: float, gap: float, tol: float = 1e-10) -> BoundInversion:
    """Bisect for the unique p in [q, 1) with d_bin(p || q) equal to ``gap``.

    The divergence is strictly increasing in p on [q, 1), so plain interval
    bisection on [q, 1 - 1e-12] converges to the upper-branch root; the
    returned p is within ``tol`` of it.
    """
    q = check_probability(q, "q", open_interval=True)
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    tol = check_positive(tol, "tol")

    if gap > -math.log(q):
        return BoundInversion(q, gap, tol, 1.0, True)

    lo, hi = q, _BISECT_HI
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if d_bin(mid, q) <= gap:
            lo = mid
        else:
            hi = mid
    return BoundInversion(q, gap, tol, lo, False)
