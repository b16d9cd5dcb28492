"""RMSE, CRPS and interval coverage."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Sequence

import numpy as np
from scipy.stats import norm

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def rmse(actual, estimate) -> float:
    a = np.asarray(actual, dtype=float)
    e = np.asarray(estimate, dtype=float)
    if a.shape != e.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {e.shape}")
    if a.size == 0:
        raise ValueError("rmse of an empty sample")
    return float(np.sqrt(np.mean((a - e) ** 2)))


def crps_gaussian(mu, sigma, obs):
    """Closed-form CRPS of N(mu, sigma^2) against ``obs``.

    Where sigma <= 0 the forecast is a point mass and the score is |obs - mu|.
    Vectorized; returns a float for scalar input.
    """
    mu, sigma, obs = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sigma, obs)))
    out = np.array(np.abs(obs - mu), dtype=float)
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos]
        z = (obs[pos] - mu[pos]) / s
        out[pos] = s * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


def crps_numeric(cdf: Callable[[np.ndarray], np.ndarray], obs: float, lower: float, upper: float, step: float = 1e-3) -> float:
    """Trapezoid quadrature of the squared gap between ``cdf`` and the step at ``obs``.

    The range is split at ``obs`` so no panel straddles the jump.
    """
    total = 0.0
    for a0, a1, h in ((lower, min(obs, upper), 0.0), (max(obs, lower), upper, 1.0)):
        if a1 <= a0:
            continue
        a = np.linspace(a0, a1, int(math.ceil((a1 - a0) / step)) + 1)
        F = np.asarray(cdf(a), dtype=float)
        if np.any(np.diff(F) < -1e-9):
            raise ValueError("cdf is not non-decreasing on the integration range")
        total += float(_trapezoid((F - h) ** 2, a))
    return total


def empirical_cdf(samples) -> Callable[[np.ndarray], np.ndarray]:
    s = np.sort(np.asarray(samples, dtype=float))
    return lambda a: np.searchsorted(s, a, side="right") / s.size


def interval_coverage(means, stds, actuals, level: float = 0.9) -> float:
    m = np.asarray(means, dtype=float)
    s = np.asarray(stds, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if not (m.shape == s.shape == a.shape):
        raise ValueError("means, stds and actuals must have equal lengths")
    if m.size == 0:
        return float("nan")
    z = norm.ppf(0.5 + level / 2)
    return float(np.mean(np.abs(a - m) <= z * s))


@dataclass
class EvalReport:
    model: str
    matching_rate: float
    rmse: Sequence[float]
    crps: Sequence[float]
    coverage: Sequence[float]
    n: int
    labels: Dict[str, str] = field(default_factory=dict)

    @staticmethod
    def _ms(v):
        v = np.asarray([x for x in v if not np.isnan(x)], dtype=float)
        if v.size == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std())

    def row(self):
        rm, rs = self._ms(self.rmse)
        cm, cs = self._ms(self.crps)
        cov = self._ms(self.coverage)[0]
        return [self.model, f"{self.matching_rate:g}", f"{rm:.4f}", f"{rs:.4f}", f"{cm:.4f}", f"{cs:.4f}", f"{cov:.4f}", str(self.n)]


REPORT_HEADER = ["model", "matching_rate", "rmse_mean", "rmse_std", "crps_mean", "crps_std", "coverage", "n"]


def write_reports(path: str | Path, reports: Iterable[EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())
