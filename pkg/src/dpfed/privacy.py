"""Differential privacy core: clamping, sensitivity, noise mechanisms,
the Laplace mean release, linear composition accounting, and an empirical
distinguishability probe.

The guarantee tracked throughout is (epsilon, delta)-DP under a stated
adjacency relation: for adjacent datasets D, D' and any outcome set S,

    Pr[M(D) in S] <= exp(epsilon) * Pr[M(D') in S] + delta.

Accounting is linear: running steps (e1, d1) and (e2, d2) costs
(e1 + e2, d1 + d2). Ledger totals are recomputed with ``math.fsum`` over
the entry list, so the reported spend is the correctly rounded sum and
does not depend on how steps were grouped.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BudgetExceeded,
    EmptyDataset,
    GaussianRequiresDelta,
    InvalidScale,
    InvalidValue,
    NotAdjacent,
)
from .rng import RandomSource


class Adjacency(Enum):
    """How neighbouring datasets differ: one record added/removed, or one replaced."""

    ADD_REMOVE = "add_remove"
    REPLACE = "replace"


@dataclass(frozen=True)
class PrivacyParams:
    """An (epsilon, delta) pair.

    epsilon = 0 is allowed only so that zero spend (0, 0) is representable;
    every mechanism requires a strictly positive epsilon at its boundary.
    """

    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise InvalidValue(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise InvalidValue(f"delta must lie in [0, 1), got {self.delta}")


ZERO_SPEND = PrivacyParams(0.0, 0.0)


@dataclass(frozen=True)
class ClampBounds:
    """Closed interval [lower, upper] that inputs are clamped into."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise InvalidValue("clamp bounds must be finite")
        if not self.lower < self.upper:
            raise InvalidValue(f"need lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class Sensitivity:
    """Worst-case change of a query over adjacent datasets."""

    value: float
    adjacency: Adjacency

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0.0):
            raise InvalidValue(f"sensitivity must be finite and >= 0, got {self.value}")


def clamp(x: float, bounds: ClampBounds) -> float:
    """Clamp a scalar into [lower, upper]. NaN is rejected, not clamped."""
    if math.isnan(x):
        raise InvalidValue("cannot clamp NaN")
    if x < bounds.lower:
        return bounds.lower
    if x > bounds.upper:
        return bounds.upper
    return float(x)


def mean_sensitivity(bounds: ClampBounds, n: int, adjacency: Adjacency = Adjacency.ADD_REMOVE) -> Sensitivity:
    """Global sensitivity of the clamped mean of n records.

    Removing, adding, or replacing one clamped record moves the mean of n
    records by at most (upper - lower) / n, so both adjacencies give the
    same value here.
    """
    if n < 1:
        raise EmptyDataset("mean sensitivity needs n >= 1")
    return Sensitivity(bounds.width / n, adjacency)


def laplace_sample(scale: float, rng: RandomSource) -> float:
    """One draw from Laplace(0, scale) by inverting the CDF.

    With u uniform on (0, 1):  x = -scale * sgn(u - 1/2) * ln(1 - 2|u - 1/2|).
    """
    if not (math.isfinite(scale) and scale > 0.0):
        raise InvalidScale(f"Laplace scale must be finite and positive, got {scale}")
    u = rng.open_uniform()
    return -scale * math.copysign(1.0, u - 0.5) * math.log1p(-2.0 * abs(u - 0.5))


def gaussian_sigma(sensitivity: Sensitivity, params: PrivacyParams) -> float:
    """Noise level for the Gaussian mechanism at the given (epsilon, delta).

    sigma = sensitivity * sqrt(2 * ln(1.25 / delta)) / epsilon, the classic
    calibration, valid for epsilon <= 1 and conservative above.
    """
    if params.delta <= 0.0:
        raise GaussianRequiresDelta("Gaussian mechanism needs delta > 0")
    if params.epsilon <= 0.0:
        raise InvalidValue("Gaussian mechanism needs epsilon > 0")
    return sensitivity.value * math.sqrt(2.0 * math.log(1.25 / params.delta)) / params.epsilon


def dp_mean(values: Sequence[float], bounds: ClampBounds, epsilon: float, rng: RandomSource) -> float:
    """Laplace release of the clamped mean.

    release = (sum of clamp(x_i)) / n + Lap((upper - lower) / (n * epsilon)).
    """
    n = len(values)
    if n == 0:
        raise EmptyDataset("dp_mean needs at least one value")
    if not (math.isfinite(epsilon) and epsilon > 0.0):
        raise InvalidValue(f"epsilon must be finite and positive, got {epsilon}")
    lo, hi = bounds.lower, bounds.upper
    total = 0.0
    for x in values:
        x = float(x)
        if math.isnan(x):
            raise InvalidValue("dp_mean input contains NaN")
        total += lo if x < lo else hi if x > hi else x
    scale = bounds.width / (n * epsilon)
    return total / n + laplace_sample(scale, rng)


@dataclass(frozen=True)
class AccountLedger:
    """Immutable privacy ledger: a budget plus the steps charged so far.

    ``spent`` is recomputed from the entries with ``math.fsum`` each time,
    never carried as a running float, so totals like 1000 x 1e-6 come out
    exact and are independent of grouping.
    """

    budget: PrivacyParams
    entries: tuple[tuple[str, PrivacyParams], ...] = ()

    @property
    def spent(self) -> PrivacyParams:
        eps = math.fsum(p.epsilon for _, p in self.entries)
        delta = math.fsum(p.delta for _, p in self.entries)
        return PrivacyParams(eps, delta)

    @property
    def remaining(self) -> PrivacyParams:
        s = self.spent
        return PrivacyParams(
            max(0.0, self.budget.epsilon - s.epsilon),
            max(0.0, self.budget.delta - s.delta),
        )

    def report(self) -> str:
        """Human-readable table of entries and totals."""
        lines = [f"{'label':<28}{'epsilon':>14}{'delta':>14}"]
        for label, p in self.entries:
            lines.append(f"{label:<28}{p.epsilon:>14.6g}{p.delta:>14.6g}")
        s = self.spent
        lines.append(f"{'spent':<28}{s.epsilon:>14.6g}{s.delta:>14.6g}")
        lines.append(f"{'budget':<28}{self.budget.epsilon:>14.6g}{self.budget.delta:>14.6g}")
        return "\n".join(lines)


def compose(ledger: AccountLedger, label: str, step: PrivacyParams) -> AccountLedger:
    """Charge one step to the ledger under linear composition.

    Returns a new ledger; the input is never mutated. If the new total
    would exceed the budget in either coordinate the step is refused with
    BudgetExceeded. Spending exactly up to the budget is allowed.
    """
    entries = ledger.entries + ((label, step),)
    eps = math.fsum(p.epsilon for _, p in entries)
    delta = math.fsum(p.delta for _, p in entries)
    if eps > ledger.budget.epsilon or delta > ledger.budget.delta:
        raise BudgetExceeded(
            f"step {label!r} ({step.epsilon}, {step.delta}) would raise spend to "
            f"({eps}, {delta}) over budget ({ledger.budget.epsilon}, {ledger.budget.delta})"
        )
    return AccountLedger(ledger.budget, entries)


@dataclass(frozen=True)
class ProbeReport:
    """Result of the empirical distinguishability probe."""

    max_ratio: float
    violated_mass: float
    n_samples: int
    n_bins: int


def _check_adjacent(d: Sequence[float], d_adj: Sequence[float]) -> None:
    """Datasets must differ by one added/removed record or one replacement."""
    a, b = Counter(d), Counter(d_adj)
    diff = sum(((a - b) + (b - a)).values())
    if abs(len(d) - len(d_adj)) > 1:
        raise NotAdjacent("datasets differ in size by more than one record")
    if len(d) != len(d_adj):
        if diff != 1:
            raise NotAdjacent("datasets of unequal size must differ in exactly one record")
    elif diff > 2:
        raise NotAdjacent("equal-size datasets may differ in at most one replaced record")


def distinguishability_probe(
    mechanism: Callable[[Sequence[float], RandomSource], float],
    d: Sequence[float],
    d_adjacent: Sequence[float],
    params: PrivacyParams,
    n_samples: int,
    n_bins: int,
    rng: RandomSource,
    min_bin_count: int | None = None,
) -> ProbeReport:
    """Estimate how distinguishable M(D) and M(D') are from samples.

    Draws n_samples from the mechanism on each dataset (D first, then D',
    one stream), histograms both over shared equal-width bins spanning the
    union of supports, and checks the per-bin DP inequality with the delta
    mass split evenly across bins. ``max_ratio`` is the largest observed
    p_hat / (q_hat + delta / n_bins) over bins holding at least
    ``min_bin_count`` numerator samples (default n_samples // 100, which
    keeps the relative sampling error of the ratio under roughly ten
    percent); in sparser bins the ratio estimate is dominated by noise,
    so they are screened instead by ``violated_mass``, the total p-mass
    of bins violating the per-bin inequality.
    """
    if n_samples < 100_000:
        raise InvalidValue("probe needs at least 1e5 samples per dataset")
    if n_bins < 2:
        raise InvalidValue("probe needs at least 2 bins")
    if min_bin_count is None:
        min_bin_count = n_samples // 100
    _check_adjacent(d, d_adjacent)

    samples_d = np.fromiter((mechanism(d, rng) for _ in range(n_samples)), dtype=np.float64, count=n_samples)
    samples_a = np.fromiter((mechanism(d_adjacent, rng) for _ in range(n_samples)), dtype=np.float64, count=n_samples)

    lo = min(samples_d.min(), samples_a.min())
    hi = max(samples_d.max(), samples_a.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts_d, _ = np.histogram(samples_d, bins=n_bins, range=(lo, hi))
    counts_a, _ = np.histogram(samples_a, bins=n_bins, range=(lo, hi))
    p = counts_d / n_samples
    q = counts_a / n_samples
    floor = params.delta / n_bins

    dense = counts_d >= min_bin_count
    # a dense numerator bin with an empty (and unfloored) denominator is an
    # honest violation, not a numeric accident: its ratio is infinite
    ratios = np.zeros(n_bins)
    np.divide(p, q + floor, out=ratios, where=dense & (q + floor > 0.0))
    ratios[dense & (q + floor == 0.0) & (p > 0.0)] = np.inf
    max_ratio = float(ratios.max()) if dense.any() else 0.0

    violated = p > math.exp(params.epsilon) * q + floor
    violated_mass = float(p[violated].sum())
    return ProbeReport(max_ratio=max_ratio, violated_mass=violated_mass, n_samples=n_samples, n_bins=n_bins)
