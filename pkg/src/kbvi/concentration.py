"""Empirical Bernstein bound for bounded martingale differences, plus a
Monte Carlo harness that measures how often it is violated."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FAMILIES = ("rademacher-iid", "bounded-ar", "sign-of-past-sum", "all-zero")


def _check_delta(delta: float, upper: float) -> None:
    if not 0 < delta < upper:
        raise ValueError(f"delta must lie in (0, {upper:.4g}), got {delta}")


def empirical_bernstein_bound(xs, c: float, delta: float):
    """2 sqrt(sum x^2 log(2/delta)) + 7 max(c, 1) log(2/delta).

    ``xs`` may be 1-D (one sequence) or 2-D (one sequence per row).
    """
    _check_delta(delta, math.exp(-1))
    x = np.asarray(xs, dtype=float)
    if not c > 0:
        raise ValueError("c must be > 0")
    if x.size and np.abs(x).max() > c:
        raise ValueError(f"|x_i| exceeds the almost-sure bound c={c}")
    eta = math.log(2.0 / delta)
    out = 2.0 * np.sqrt(np.square(x).sum(axis=-1) * eta) + 7.0 * max(c, 1.0) * eta
    return float(out) if np.ndim(out) == 0 else out


def hoeffding_martingale_bound(n: int, c: float, delta: float) -> float:
    """c sqrt(2 n log(2/delta))."""
    _check_delta(delta, 1.0)
    return c * math.sqrt(2.0 * n * math.log(2.0 / delta))


def failure_budget(n: int, delta: float) -> float:
    """Probability mass the bound may fail on: 2 (floor(log2 n) + 3) delta."""
    return 2.0 * (math.floor(math.log2(n)) + 3) * delta


@dataclass(frozen=True)
class MartingaleFamily:
    """Generator of bounded martingale-difference sequences.

    * ``rademacher-iid``: X_i = c R_i.
    * ``bounded-ar``: X_i = clip(phi X_{i-1}, -0.9c, 0.9c) R_i with X_0 = c.
    * ``sign-of-past-sum``: X_i = c R_i if S_{i-1} >= 0 else c R_i / 4.
    * ``all-zero``: X_i = 0.

    R_i are independent signs, so every family is conditionally mean zero.
    """

    kind: str = "rademacher-iid"
    c: float = 1.0
    phi: float = 0.95

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValueError(f"unknown family {self.kind!r}")
        if not self.c > 0:
            raise ValueError("c must be > 0")

    @property
    def label(self) -> str:
        return f"bounded-ar({self.phi:g})" if self.kind == "bounded-ar" else self.kind

    def sample(self, n: int, trials: int, rng: np.random.Generator) -> np.ndarray:
        """(trials, n) array of sequences."""
        if self.kind == "all-zero":
            return np.zeros((trials, n))
        signs = rng.integers(0, 2, size=(trials, n)) * 2.0 - 1.0
        if self.kind == "rademacher-iid":
            return self.c * signs
        x = np.empty((trials, n))
        if self.kind == "bounded-ar":
            prev = np.full(trials, self.c)
            cap = 0.9 * self.c
            for i in range(n):
                prev = np.clip(self.phi * prev, -cap, cap) * signs[:, i]
                x[:, i] = prev
            return x
        total = np.zeros(trials)
        for i in range(n):
            x[:, i] = np.where(total >= 0, self.c, 0.25 * self.c) * signs[:, i]
            total += x[:, i]
        return x


DEFAULT_FAMILIES = (
    MartingaleFamily("rademacher-iid"),
    MartingaleFamily("bounded-ar", phi=0.95),
    MartingaleFamily("bounded-ar", phi=1.5),
    MartingaleFamily("sign-of-past-sum"),
)

_BLOCK = 1000


def coverage_experiment(family: MartingaleFamily, n: int, delta: float, trials: int = 10_000,
                        seed: int = 0) -> float:
    """Fraction of trials with |sum X_i| above the empirical Bernstein bound.

    Trials are drawn in blocks of 1000, each from its own stream keyed by
    (seed, n, block), so the count does not depend on evaluation order.
    """
    if trials < 1000:
        raise ValueError("coverage_experiment needs at least 1000 trials")
    violations = 0
    for block, start in enumerate(range(0, trials, _BLOCK)):
        size = min(_BLOCK, trials - start)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, n, block])))
        xs = family.sample(n, size, rng)
        bound = empirical_bernstein_bound(xs, family.c, delta)
        violations += int(np.count_nonzero(np.abs(xs.sum(axis=1)) > bound))
    return violations / trials


@dataclass(frozen=True)
class CoverageResult:
    family: str
    n: int
    delta: float
    trials: int
    rate: float
    budget: float

    @property
    def slack(self) -> float:
        return 3.0 * math.sqrt(self.budget / self.trials)

    @property
    def passed(self) -> bool:
        return self.rate <= self.budget + self.slack


def coverage_table(families=DEFAULT_FAMILIES, ns=(64, 256, 1024), deltas=(0.005, 0.01),
                   trials: int = 10_000, seed: int = 0) -> list[CoverageResult]:
    rows = []
    for fam in families:
        for n in ns:
            for delta in deltas:
                rate = coverage_experiment(fam, n, delta, trials, seed)
                rows.append(CoverageResult(fam.label, n, delta, trials, rate, failure_budget(n, delta)))
    return rows
