"""Training samples and prediction features for lane choice learning.

A feature row is ``[ds_<l'> for each monitored upstream lane, t_cycle, delta]``:
upstream departures accumulated since the reference anchor, the anchor's
time in the upstream cycle, and the span since the anchor.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .curves import CumulativeCurve, MatchedVehiclePair, SignalTiming, curve_value

logger = logging.getLogger(__name__)

FULL = "full"
NO_LINK = "no_link"  # ablation: drop link arrivals
AGGREGATE = "aggregate"  # ablation: summed link arrivals instead of the lane vector
FEATURE_SETS = (FULL, NO_LINK, AGGREGATE)

GAP, SUB, SPAN, HOP = "gap", "sub", "span", "hop"


@dataclass(frozen=True)
class FeatureSpec:
    upstream_lanes: Tuple[str, ...]
    feature_set: str = FULL

    def __post_init__(self):
        object.__setattr__(self, "upstream_lanes", tuple(self.upstream_lanes))
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {self.feature_set!r}")

    @property
    def names(self) -> Tuple[str, ...]:
        if self.feature_set == FULL:
            link = tuple(f"ds_{l}" for l in self.upstream_lanes)
        elif self.feature_set == AGGREGATE:
            link = ("ds_link",)
        else:
            link = ()
        return link + ("t_cycle", "delta")

    @property
    def width(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class FeatureVector:
    """Raw (unnormalized) features for one (reference anchor, query time)."""

    accumulations: np.ndarray
    t_cycle: float
    delta: float

    def as_row(self, spec: FeatureSpec) -> np.ndarray:
        return _assemble(self.accumulations[None, :], np.array([self.t_cycle]), np.array([self.delta]), spec)[0]


@dataclass(frozen=True)
class TrainingSample:
    lane: str
    x: np.ndarray  # raw feature row, FeatureSpec order
    target: float
    kind: str = GAP
    t_ref: float = 0.0
    t_query: float = 0.0


@dataclass(frozen=True)
class Normalizer:
    shift: np.ndarray
    scale: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.shift) / self.scale

    def invert(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.shift

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["shift"], dtype=float), np.array(d["scale"], dtype=float))


def _assemble(acc: np.ndarray, t_cycle: np.ndarray, delta: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    if spec.feature_set == FULL:
        link = acc
    elif spec.feature_set == AGGREGATE:
        link = acc.sum(axis=1, keepdims=True)
    else:
        link = np.empty((acc.shape[0], 0))
    return np.column_stack([link, t_cycle, delta])


def upstream_accumulations(upstream_curves: Mapping[str, CumulativeCurve], lanes: Sequence[str], t_ref, t):
    """Departures per upstream lane over (t_ref, t]; shape (n, len(lanes))."""
    t_ref = np.atleast_1d(np.asarray(t_ref, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    cols = [curve_value(upstream_curves[l], t) - curve_value(upstream_curves[l], t_ref) for l in lanes]
    if not cols:
        return np.zeros((t.size, 0))
    return np.column_stack(cols)


def feature_matrix(
    t_ref,
    t,
    upstream_curves: Mapping[str, CumulativeCurve],
    signal: SignalTiming,
    spec: FeatureSpec,
) -> np.ndarray:
    """Vectorized raw features for reference times ``t_ref`` and query times ``t``."""
    t_ref = np.broadcast_to(np.asarray(t_ref, dtype=float), np.shape(t)).reshape(-1)
    t = np.asarray(t, dtype=float).reshape(-1)
    if np.any(t < t_ref):
        raise ValueError("query time precedes its reference anchor")
    acc = upstream_accumulations(upstream_curves, spec.upstream_lanes, t_ref, t)
    return _assemble(acc, signal.time_in_cycle(t_ref), t - t_ref, spec)


def build_prediction_features(
    t_ref: float,
    t: float,
    upstream_curves: Mapping[str, CumulativeCurve],
    signal: SignalTiming,
    lanes: Optional[Sequence[str]] = None,
) -> FeatureVector:
    if not t > t_ref:
        raise ValueError(f"query time {t} must follow the reference anchor at {t_ref}")
    lanes = tuple(lanes) if lanes is not None else tuple(upstream_curves)
    acc = upstream_accumulations(upstream_curves, lanes, t_ref, t)[0]
    return FeatureVector(acc, float(signal.time_in_cycle(t_ref)), float(t - t_ref))


def _horizon(curves: Mapping[str, CumulativeCurve]) -> float:
    return max((float(c.times[-1]) for c in curves.values() if len(c)), default=0.0)


def extract_training_samples(
    pairs_by_lane: Mapping[str, Sequence[MatchedVehiclePair]],
    upstream_curves: Mapping[str, CumulativeCurve],
    signal: SignalTiming,
    spec: FeatureSpec,
    k_sub: int = 3,
    truth_curves: Optional[Mapping[str, CumulativeCurve]] = None,
    k_span: int = 0,
    max_span: float = 600.0,
    hops: Sequence[int] = (),
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, List[TrainingSample]]:
    """Samples from consecutive matched vehicles in each downstream lane.

    Each gap (t_m, t_{m+1}] yields the observed accumulation
    A*_{m+1} - A*_m. With ``truth_curves`` (simulated data) every gap also
    yields ``k_sub`` samples at uniform interior times whose targets are read
    off the true arrival curve, and ``k_span`` samples at uniform times in
    (t_m, t_m + max_span], covering the long spans met in real time. ``hops``
    adds samples between anchors m and m+k with spans up to ``max_span``;
    these need no ground truth.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out: Dict[str, List[TrainingSample]] = {}
    for lane, pairs in pairs_by_lane.items():
        pairs = sorted(pairs, key=lambda p: (p.t_up, p.plate))
        if len(pairs) < 2:
            warnings.warn(f"lane {lane}: {len(pairs)} matched vehicle(s), no training samples", stacklevel=2)
            out[lane] = []
            continue
        t = np.array([p.t_up for p in pairs])
        a = np.array([p.anchor for p in pairs])
        refs, queries, targets, kinds = [t[:-1]], [t[1:]], [np.diff(a)], [np.full(t.size - 1, GAP, dtype=object)]

        truth = truth_curves.get(lane) if truth_curves else None
        if k_sub > 0 and truth is not None:
            u = rng.random((t.size - 1, k_sub))
            tq = (t[:-1, None] + u * (t[1:] - t[:-1])[:, None]).reshape(-1)
            tr = np.repeat(t[:-1], k_sub)
            keep = tq > tr
            tq, tr = tq[keep], tr[keep]
            refs.append(tr)
            queries.append(tq)
            targets.append(curve_value(truth, tq) - curve_value(truth, tr))
            kinds.append(np.full(tq.size, SUB, dtype=object))
        if k_span > 0 and truth is not None:
            u = 1.0 - rng.random((t.size, k_span))
            tq = (t[:, None] + u * max_span).reshape(-1)
            tr = np.repeat(t, k_span)
            keep = tq <= _horizon(upstream_curves)
            tq, tr = tq[keep], tr[keep]
            refs.append(tr)
            queries.append(tq)
            targets.append(curve_value(truth, tq) - curve_value(truth, tr))
            kinds.append(np.full(tq.size, SPAN, dtype=object))
        for k in hops:
            if k < 2 or t.size <= k:
                continue
            span = t[k:] - t[:-k]
            ok = span <= max_span
            refs.append(t[:-k][ok])
            queries.append(t[k:][ok])
            targets.append((a[k:] - a[:-k])[ok])
            kinds.append(np.full(int(ok.sum()), HOP, dtype=object))

        tr = np.concatenate(refs)
        tq = np.concatenate(queries)
        X = feature_matrix(tr, tq, upstream_curves, signal, spec)
        y = np.concatenate(targets)
        k = np.concatenate(kinds)
        out[lane] = [TrainingSample(lane, X[i], float(y[i]), k[i], float(tr[i]), float(tq[i])) for i in range(y.size)]
    return out


def samples_to_arrays(samples: Sequence[TrainingSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.empty((0, 0)), np.empty(0)
    return np.vstack([s.x for s in samples]), np.array([s.target for s in samples])


def fit_normalizer(X: np.ndarray) -> Normalizer:
    X = np.asarray(X, dtype=float)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return Normalizer(shift, scale)


def normalize(samples: Sequence[TrainingSample]) -> Tuple[np.ndarray, Normalizer]:
    """Zero-mean, unit-variance features; targets stay in vehicles."""
    X, _ = samples_to_arrays(samples)
    norm = fit_normalizer(X)
    return norm.apply(X), norm


def empirical_lane_share(samples: Sequence[TrainingSample], spec: FeatureSpec) -> Optional[float]:
    """Observed lane arrivals divided by observed link arrivals over gap samples.

    Returns None when no link arrivals were observed.
    """
    gaps = [s for s in samples if s.kind == GAP]
    if not gaps or spec.feature_set == NO_LINK:
        return None
    n_link = len(spec.names) - 2
    denom = sum(float(np.sum(s.x[:n_link])) for s in gaps)
    if denom <= 0:
        return None
    return sum(s.target for s in gaps) / denom


def write_samples_csv(path: str | Path, samples: Sequence[TrainingSample], spec: FeatureSpec) -> int:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lane"] + list(spec.names) + ["target"])
        for s in samples:
            w.writerow([s.lane] + [repr(float(v)) for v in s.x] + [repr(float(s.target))])
    return len(samples)
