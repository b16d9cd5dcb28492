"""Historical and real-time lane-based arrival curve reconstruction."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bacl import BaclModel, PredictiveDistribution, predict
from .curves import CumulativeCurve, MatchedVehiclePair, SignalTiming, curve_value
from .features import FeatureSpec, feature_matrix

logger = logging.getLogger(__name__)

HISTORICAL = "historical"
REALTIME = "realtime"
DIV_EPS = 1e-6


class LanePredictor:
    """Binds a trained model to a fixed Monte-Carlo sample count."""

    def __init__(self, model: BaclModel, n_samples: Optional[int] = None):
        self.model = model
        self.n_samples = n_samples
        self.spec: FeatureSpec = model.spec

    def __call__(self, X: np.ndarray) -> PredictiveDistribution:
        return predict(self.model, X, self.n_samples)


def _as_predictor(model):
    return LanePredictor(model) if isinstance(model, BaclModel) else model


@dataclass(frozen=True)
class Anchor:
    t: float
    index: float
    plate: str = ""

    @classmethod
    def of(cls, pair: MatchedVehiclePair) -> "Anchor":
        return cls(pair.t_up, pair.anchor, pair.plate)


def _anchors(pairs) -> List[Anchor]:
    out = [p if isinstance(p, Anchor) else Anchor.of(p) for p in pairs]
    return sorted(out, key=lambda a: (a.t, a.index))


@dataclass(frozen=True)
class ReconstructedCurve:
    lane: str
    times: np.ndarray
    mean: np.ndarray
    var_epistemic: np.ndarray
    var_aleatoric: np.ndarray
    is_anchor: np.ndarray
    mode: str
    anchors: Tuple[Anchor, ...] = ()
    diagnostics: Counter = field(default_factory=Counter)

    @property
    def var_total(self) -> np.ndarray:
        return self.var_epistemic + self.var_aleatoric

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var_total)

    def __len__(self):
        return self.times.size

    def interior(self) -> np.ndarray:
        """Mask of points that are not anchor observations."""
        return ~self.is_anchor


def boundary_scale(observed: float, predicted_end: float) -> Optional[float]:
    """Factor making the scaled prediction hit the right-hand anchor.

    None when the prediction at the gap end is too small to divide by.
    """
    if observed == 0:
        return 0.0
    if predicted_end <= DIV_EPS:
        return None
    return observed / predicted_end


def taper(u: np.ndarray) -> np.ndarray:
    """Variance taper vanishing at both anchors, 1 mid-gap."""
    u = np.clip(u, 0.0, 1.0)
    return 4.0 * u * (1.0 - u)


def grid_between(t0: float, t1: float, step: float) -> np.ndarray:
    """Grid multiples of ``step`` strictly inside (t0, t1)."""
    k0 = int(np.floor(t0 / step)) + 1
    k1 = int(np.ceil(t1 / step)) - 1
    g = np.arange(k0, k1 + 1, dtype=float) * step
    return g[(g > t0) & (g < t1)]


def reconstruct_gap(
    left: Anchor,
    right: Anchor,
    upstream_curves: Mapping[str, CumulativeCurve],
    predictor,
    signal: SignalTiming,
    grid_step: float = 1.0,
    diagnostics: Optional[Counter] = None,
):
    """Reconstruct (t_m, t_{m+1}]: grid points inside the gap plus the right anchor.

    Returns (times, mean, var_epistemic, var_aleatoric).
    """
    ts = np.append(grid_between(left.t, right.t, grid_step), right.t)
    X = feature_matrix(left.t, ts, upstream_curves, signal, predictor.spec)
    pd = predictor(X)
    observed = right.index - left.index
    lam = boundary_scale(observed, float(pd.mean[-1]))
    u = (ts - left.t) / (right.t - left.t)
    if lam is None:
        if diagnostics is not None:
            diagnostics["lambda_fallback"] += 1
        logger.info("gap (%.3f, %.3f]: prediction at gap end ~0, spreading %g arrivals linearly", left.t, right.t, observed)
        inc = observed * u
        scale2 = 1.0
    else:
        inc = lam * pd.mean
        scale2 = lam * lam
    mean = np.maximum.accumulate(np.clip(left.index + inc, left.index, right.index))
    w = scale2 * taper(u)
    return ts, mean, w * pd.var_epistemic, w * pd.var_aleatoric


def historical_acr(
    lane: str,
    anchors: Sequence,
    upstream_curves: Mapping[str, CumulativeCurve],
    model,
    signal: SignalTiming,
    grid_step: float = 1.0,
) -> ReconstructedCurve:
    """Reconstruct a lane's arrival curve between consecutive matched vehicles.

    Inside each gap the model's predicted accumulation is rescaled so the
    curve meets the next anchor; variance is rescaled by the square of that
    factor and tapered to zero at both anchors.
    """
    anchors = _anchors(anchors)
    if len(anchors) < 2:
        raise ValueError(f"lane {lane}: historical reconstruction needs at least two anchors")
    predictor = _as_predictor(model)
    diag: Counter = Counter()
    parts_t = [np.array([anchors[0].t])]
    parts_m = [np.array([anchors[0].index])]
    parts_e = [np.zeros(1)]
    parts_a = [np.zeros(1)]
    parts_k = [np.ones(1, dtype=bool)]
    for left, right in zip(anchors[:-1], anchors[1:]):
        if right.t <= left.t:
            diag["degenerate_gap"] += 1
            continue
        ts, mean, ve, va = reconstruct_gap(left, right, upstream_curves, predictor, signal, grid_step, diag)
        flag = np.zeros(ts.size, dtype=bool)
        flag[-1] = True
        parts_t.append(ts)
        parts_m.append(mean)
        parts_e.append(ve)
        parts_a.append(va)
        parts_k.append(flag)
    return ReconstructedCurve(
        lane,
        np.concatenate(parts_t),
        np.concatenate(parts_m),
        np.concatenate(parts_e),
        np.concatenate(parts_a),
        np.concatenate(parts_k),
        HISTORICAL,
        tuple(anchors),
        diag,
    )


def realtime_acr(
    lane: str,
    anchor,
    upstream_curves: Mapping[str, CumulativeCurve],
    model,
    signal: SignalTiming,
    query_times,
) -> ReconstructedCurve:
    """Extrapolate a lane's arrival curve beyond its newest matched vehicle.

    Only upstream detections at or before each query time enter its estimate.
    """
    anchor = anchor if isinstance(anchor, Anchor) else Anchor.of(anchor)
    ts = np.atleast_1d(np.asarray(query_times, dtype=float))
    if np.any(ts < anchor.t):
        raise ValueError(f"query before the reference anchor at {anchor.t}")
    predictor = _as_predictor(model)
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    X = feature_matrix(anchor.t, ts, upstream_curves, signal, predictor.spec)
    pd = predictor(X)
    mean = np.maximum.accumulate(anchor.index + pd.mean)
    return ReconstructedCurve(
        lane, ts, mean, pd.var_epistemic.copy(), pd.var_aleatoric.copy(),
        np.zeros(ts.size, dtype=bool), REALTIME, (anchor,),
    )


@dataclass(frozen=True)
class RealtimeEstimate:
    t: float
    mean: float
    var_epistemic: float
    var_aleatoric: float
    anchor: Anchor

    @property
    def var_total(self) -> float:
        return self.var_epistemic + self.var_aleatoric


class RealtimeState:
    """Single-writer real-time reconstruction state for one lane.

    Matched vehicles arrive through :meth:`re_anchor` as they are detected
    downstream; :meth:`query` emits an estimate against the newest one.
    Emitted estimates are never revised.
    """

    def __init__(self, lane: str, model, upstream_curves: Mapping[str, CumulativeCurve], signal: SignalTiming):
        self.lane = lane
        self.predictor = _as_predictor(model)
        self.upstream_curves = upstream_curves
        self.signal = signal
        self.anchors: List[Anchor] = []
        self.emitted: List[RealtimeEstimate] = []
        self.tally: Counter = Counter()

    @property
    def anchor(self) -> Optional[Anchor]:
        return self.anchors[-1] if self.anchors else None

    @property
    def warming_up(self) -> bool:
        return not self.anchors

    def re_anchor(self, pair) -> bool:
        new = pair if isinstance(pair, Anchor) else Anchor.of(pair)
        cur = self.anchor
        if cur is not None:
            if new == cur or (new.t == cur.t and new.index == cur.index):
                self.tally["duplicate"] += 1
                return False
            if new.t < cur.t:
                self.tally["out_of_order"] += 1
                return False
        self.anchors.append(new)
        return True

    def query(self, t: float) -> Optional[RealtimeEstimate]:
        if self.warming_up:
            self.tally["warm_up"] += 1
            return None
        a = self.anchor
        rc = realtime_acr(self.lane, a, self.upstream_curves, self.predictor, self.signal, [t])
        est = RealtimeEstimate(float(t), float(rc.mean[0]), float(rc.var_epistemic[0]), float(rc.var_aleatoric[0]), a)
        self.emitted.append(est)
        return est

    def closed_gaps(self) -> List[Tuple[Anchor, Anchor]]:
        return list(zip(self.anchors[:-1], self.anchors[1:]))

    def historical(self, grid_step: float = 1.0) -> ReconstructedCurve:
        """Historical reconstruction over every gap closed so far."""
        return historical_acr(self.lane, self.anchors, self.upstream_curves, self.predictor, self.signal, grid_step)


def replay(
    lane: str,
    pairs: Sequence[MatchedVehiclePair],
    upstream_curves: Mapping[str, CumulativeCurve],
    model,
    signal: SignalTiming,
    query_times: Iterable[float],
) -> RealtimeState:
    """Stream matched vehicles in order of downstream detection, querying at
    ``query_times``. A pair becomes usable once its downstream read exists."""
    state = RealtimeState(lane, model, upstream_curves, signal)
    events = sorted(pairs, key=lambda p: (p.t_down, p.t_up, p.plate))
    i = 0
    for t in sorted(query_times):
        while i < len(events) and events[i].t_down <= t:
            state.re_anchor(events[i])
            i += 1
        state.query(t)
    while i < len(events):
        state.re_anchor(events[i])
        i += 1
    return state


@dataclass(frozen=True)
class VehicleCount:
    mean: np.ndarray
    raw: np.ndarray
    var: np.ndarray


def vehicle_count(arrival_mean, arrival_var, departures: CumulativeCurve, t) -> VehicleCount:
    """Vehicles stored on the lane: estimated arrivals minus observed departures."""
    raw = np.asarray(arrival_mean, dtype=float) - curve_value(departures, t)
    return VehicleCount(np.maximum(raw, 0.0), raw, np.asarray(arrival_var, dtype=float) + 0.0)


def write_curve_csv(path: str | Path, curves: Iterable[ReconstructedCurve]) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lane", "t", "mean", "var_total", "var_epistemic", "var_aleatoric", "mode"])
        for c in curves:
            for i in range(c.times.size):
                w.writerow([
                    c.lane, repr(float(c.times[i])), repr(float(c.mean[i])), repr(float(c.var_total[i])),
                    repr(float(c.var_epistemic[i])), repr(float(c.var_aleatoric[i])), c.mode,
                ])
                n += 1
    return n


def write_count_csv(path: str | Path, rows: Iterable[Tuple[str, float, float, float, float]]) -> int:
    """Rows are (lane, t, count, var, true_count or nan)."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lane", "t", "count", "var_total", "true_count"])
        for lane, t, c, v, g in rows:
            w.writerow([lane, repr(float(t)), repr(float(c)), repr(float(v)), "" if g is None or np.isnan(g) else repr(float(g))])
            n += 1
    return n
