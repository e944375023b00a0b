"""Small estimators shared by tests, attacks and the harness."""

from __future__ import annotations

import math
from dataclasses import dataclass


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n <= 0:
        return (0.0, 1.0)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def binomial_se(k: int, n: int) -> float:
    if n <= 0:
        return float("nan")
    p = k / n
    return math.sqrt(p * (1 - p) / n)


@dataclass
class Proportion:
    hits: int
    trials: int

    @property
    def p(self) -> float:
        return self.hits / self.trials if self.trials else float("nan")

    @property
    def se(self) -> float:
        return binomial_se(self.hits, self.trials)

    def ci(self, z: float = 1.96):
        return wilson_interval(self.hits, self.trials, z)


def mean_se(values) -> tuple[float, float]:
    vals = list(values)
    n = len(vals)
    if n == 0:
        return float("nan"), float("nan")
    mu = sum(vals) / n
    if n == 1:
        return mu, float("inf")
    var = sum((v - mu) ** 2 for v in vals) / (n - 1)
    return mu, math.sqrt(var / n)
