"""Simulated train/test periods, per-lane model fitting and sweep cells.

A cell is one (matching rate, seed) pair: a training period and an
independent test period are simulated, both degraded to the matching rate,
models are fit on the first and scored on the second.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bacl import BAYESIAN, DETERMINISTIC, BaclModel, Hyperparameters, TrainResult, fit_lane_model
from .curves import (
    CumulativeCurve,
    LprRecord,
    MatchedVehiclePair,
    SignalTiming,
    SiteLayout,
    build_departure_curves,
    curve_value,
    match_plates,
)
from .features import FULL, NO_LINK, FeatureSpec, TrainingSample, extract_training_samples
from .metrics import EvalReport, crps_gaussian, interval_coverage, rmse
from .reconstruct import Anchor, grid_between, historical_acr, replay
from .seeding import substream, substream_int
from .simulator import GroundTruth, SimConfig, default_config, degrade_to_matching_rate, simulate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    mode: str = BAYESIAN
    feature_set: str = FULL
    linear: bool = False
    point_mass: bool = False  # score the mean alone, CRPS = |error|


VARIANTS = {
    "bacl": Variant("bacl"),
    "lcnn": Variant("lcnn", DETERMINISTIC, point_mass=True),
    "bacl_no_link": Variant("bacl_no_link", BAYESIAN, NO_LINK),
    "linear": Variant("linear", linear=True, point_mass=True),
}


@dataclass(frozen=True)
class Protocol:
    scenario: str = "pm_peak"
    train_duration: float = 7200.0
    test_duration: float = 1800.0
    k_sub: int = 3
    k_span: int = 3
    max_span: float = 600.0
    max_samples: int = 3000
    grid_step: float = 1.0
    level: float = 0.9
    hyper: Hyperparameters = Hyperparameters()
    sim_overrides: Tuple[Tuple[str, object], ...] = ()

    def config(self, seed: int, duration: float) -> SimConfig:
        return default_config(seed=seed, duration=duration, scenario=self.scenario, **dict(self.sim_overrides))


@dataclass
class Period:
    layout: SiteLayout
    signal: SignalTiming  # upstream signal
    truth: Optional[GroundTruth]
    upstream: List[LprRecord]
    downstream: List[LprRecord]
    upstream_curves: Dict[str, CumulativeCurve]
    downstream_curves: Dict[str, CumulativeCurve]
    pairs: Dict[str, List[MatchedVehiclePair]]

    def truth_curves(self) -> Optional[Dict[str, CumulativeCurve]]:
        if self.truth is None:
            return None
        return {l: self.truth.arrival_curve(l) for l in self.layout.monitored_downstream}


def observe(layout: SiteLayout, signal: SignalTiming, truth: Optional[GroundTruth], upstream, downstream) -> Period:
    """Curves and plate matches from raw records."""
    up_c = build_departure_curves(upstream, layout.monitored_upstream)
    down_c = build_departure_curves(downstream, layout.monitored_downstream)
    by_lane = match_plates(upstream, downstream, down_c).by_lane()
    pairs = {l: by_lane.get(l, []) for l in layout.monitored_downstream}
    return Period(layout, signal, truth, list(upstream), list(downstream), up_c, down_c, pairs)


def simulate_period(seed: int, rate: float, duration: float, tag: str, protocol: Protocol = Protocol()) -> Period:
    cfg = protocol.config(substream_int(seed, "simulate", tag), duration)
    truth, up, down = simulate(cfg)
    if rate < 1.0:
        up, down = degrade_to_matching_rate(up, down, rate, substream(seed, "degrade", tag, round(rate * 1000)))
    return observe(cfg.layout, cfg.upstream_signal, truth, up, down)


def training_samples(period: Period, spec: FeatureSpec, protocol: Protocol, seed: int) -> Dict[str, List[TrainingSample]]:
    samples = extract_training_samples(
        period.pairs, period.upstream_curves, period.signal, spec,
        k_sub=protocol.k_sub, truth_curves=period.truth_curves(), k_span=protocol.k_span,
        max_span=protocol.max_span, rng=substream(seed, "samples"),
    )
    if protocol.max_samples:
        for lane, s in samples.items():
            if len(s) > protocol.max_samples:
                keep = np.sort(substream(seed, "subsample", lane).choice(len(s), protocol.max_samples, replace=False))
                samples[lane] = [s[i] for i in keep]
    return samples


def fit_models(
    period: Period,
    protocol: Protocol,
    seed: int,
    mode: str = BAYESIAN,
    feature_set: str = FULL,
) -> Dict[str, TrainResult]:
    spec = FeatureSpec(period.layout.monitored_upstream, feature_set)
    out = {}
    for lane, samples in training_samples(period, spec, protocol, seed).items():
        if not samples:
            continue
        out[lane] = fit_lane_model(samples, spec, protocol.hyper, mode, substream_int(seed, "train", lane), lane)
    return out


def linear_interpolation(anchors: Sequence, grid_step: float = 1.0):
    """Baseline: cumulative index interpolated linearly in time between anchors.

    Returns (times, means, is_anchor) on the same grid as historical_acr.
    """
    a = sorted((p if isinstance(p, Anchor) else Anchor.of(p) for p in anchors), key=lambda x: (x.t, x.index))
    ts, ms, ks = [a[0].t], [a[0].index], [True]
    for left, right in zip(a[:-1], a[1:]):
        if right.t <= left.t:
            continue
        g = grid_between(left.t, right.t, grid_step)
        ts.extend(g)
        ms.extend(left.index + (right.index - left.index) * (g - left.t) / (right.t - left.t))
        ks.extend([False] * g.size)
        ts.append(right.t)
        ms.append(right.index)
        ks.append(True)
    return np.array(ts), np.array(ms), np.array(ks)


@dataclass
class Scores:
    """Pooled interior-grid predictions for one model on one test period."""

    mean: np.ndarray
    std: np.ndarray
    actual: np.ndarray
    per_lane: Dict[str, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.actual.size)

    def rmse(self) -> float:
        return rmse(self.actual, self.mean)

    def crps(self) -> float:
        return float(np.mean(crps_gaussian(self.mean, self.std, self.actual)))

    def coverage(self, level: float = 0.9) -> float:
        return interval_coverage(self.mean, self.std, self.actual, level)


def score_historical(
    period: Period,
    models: Optional[Mapping[str, object]],
    grid_step: float = 1.0,
    point_mass: bool = False,
) -> Scores:
    """Historical reconstruction scored at grid times strictly between anchors.

    ``models`` None scores the linear-interpolation baseline. With
    ``point_mass`` the predictive spread is dropped.
    """
    mus, sds, acts, per_lane = [], [], [], {}
    for lane, pairs in period.pairs.items():
        if len(pairs) < 2 or (models is not None and lane not in models):
            continue
        if models is None:
            t, m, k = linear_interpolation(pairs, grid_step)
            mu, sd, t = m[~k], np.zeros(int((~k).sum())), t[~k]
        else:
            model = models[lane]
            model = model.model if isinstance(model, TrainResult) else model
            rc = historical_acr(lane, pairs, period.upstream_curves, model, period.signal, grid_step)
            keep = rc.interior()
            t, mu, sd = rc.times[keep], rc.mean[keep], rc.std[keep]
            if point_mass:
                sd = np.zeros_like(sd)
        a = curve_value(period.truth.arrival_curve(lane), t)
        if a.size:
            per_lane[lane] = rmse(a, mu)
        mus.append(mu)
        sds.append(sd)
        acts.append(a)
    cat = lambda v: np.concatenate(v) if v else np.empty(0)
    return Scores(cat(mus), cat(sds), cat(acts), per_lane)


@dataclass(frozen=True)
class CellResult:
    variant: str
    matching_rate: float
    seed: int
    rmse: float
    crps: float
    coverage: float
    n: int
    error: str = ""


def run_cell(rate: float, seed: int, variants: Sequence[str] = ("bacl",), protocol: Protocol = Protocol()) -> List[CellResult]:
    """Train on one simulated period, score every variant on a second one."""
    cell_seed = substream_int(seed, "cell", round(rate * 1000))
    train = simulate_period(cell_seed, rate, protocol.train_duration, "train", protocol)
    test = simulate_period(cell_seed, rate, protocol.test_duration, "test", protocol)
    out = []
    for name in variants:
        v = VARIANTS[name]
        try:
            models = None if v.linear else fit_models(train, protocol, cell_seed, v.mode, v.feature_set)
            s = score_historical(test, models, protocol.grid_step, v.point_mass)
            out.append(CellResult(name, rate, seed, s.rmse(), s.crps(), s.coverage(protocol.level), s.n))
        except Exception as exc:  # recorded, the sweep carries on
            logger.exception("cell rate=%s seed=%s variant=%s failed", rate, seed, name)
            out.append(CellResult(name, rate, seed, np.nan, np.nan, np.nan, 0, f"{type(exc).__name__}: {exc}"))
    return out


def _cell_job(args):
    return run_cell(*args)


def sweep(
    rates: Sequence[float],
    seeds: Sequence[int],
    variants: Sequence[str] = ("bacl",),
    protocol: Protocol = Protocol(),
    jobs: int = 1,
) -> List[CellResult]:
    """All (rate, seed) cells; results ordered by (rate, seed, variant) whatever ``jobs`` is."""
    tasks = [(r, s, tuple(variants), protocol) for r in rates for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, tasks))
    else:
        results = [_cell_job(t) for t in tasks]
    return [c for cell in results for c in cell]


def summarize(results: Iterable[CellResult]) -> List[EvalReport]:
    """One report per (variant, matching rate), aggregating over seeds."""
    groups: Dict[Tuple[str, float], List[CellResult]] = {}
    for r in results:
        groups.setdefault((r.variant, r.matching_rate), []).append(r)
    reports = []
    for (variant, rate), rs in sorted(groups.items()):
        ok = [r for r in rs if not r.error]
        reports.append(EvalReport(
            variant, rate,
            [r.rmse for r in ok], [r.crps for r in ok], [r.coverage for r in ok],
            sum(r.n for r in ok), {"seeds": " ".join(str(r.seed) for r in rs)},
        ))
    return reports


def median_by_rate(results: Iterable[CellResult], variant: str, metric: str = "rmse") -> Dict[float, float]:
    vals: Dict[float, List[float]] = {}
    for r in results:
        if r.variant == variant and not r.error:
            vals.setdefault(r.matching_rate, []).append(getattr(r, metric))
    return {k: float(np.median(v)) for k, v in sorted(vals.items())}


def realtime_errors(period: Period, models: Mapping[str, object], query_times: Optional[Mapping[str, np.ndarray]] = None):
    """Replay each lane in real time; returns lane -> (times, mean, var, truth).

    Without ``query_times`` each lane is queried just before every matched
    vehicle's downstream detection, the longest look-ahead the stream allows.
    """
    out = {}
    for lane, pairs in period.pairs.items():
        if lane not in models or not pairs:
            continue
        model = models[lane]
        model = model.model if isinstance(model, TrainResult) else model
        if query_times is not None:
            qs = np.asarray(query_times[lane], dtype=float)
        else:
            qs = np.array(sorted(p.t_down for p in pairs))[1:] - 1e-3
        state = replay(lane, pairs, period.upstream_curves, model, period.signal, qs)
        e = state.emitted
        t = np.array([x.t for x in e])
        out[lane] = (
            t,
            np.array([x.mean for x in e]),
            np.array([x.var_total for x in e]),
            curve_value(period.truth.arrival_curve(lane), t) if t.size else np.empty(0),
        )
    return out
