"""LPR events, signal timing and cumulative curve algebra.

Curves are right-continuous step functions: the value at ``t`` is the index of
the latest point with timestamp <= t, and 0 before the first point.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DEPARTURE = "departure"
LINK_ARRIVAL = "link_arrival"
LANE_ARRIVAL = "lane_arrival"
CURVE_KINDS = (DEPARTURE, LINK_ARRIVAL, LANE_ARRIVAL)


@dataclass(frozen=True)
class LprRecord:
    plate: str
    lane: str
    timestamp: float
    recognized: bool = True

    def __post_init__(self):
        if not self.timestamp >= 0:
            raise ValueError(f"negative timestamp {self.timestamp} for plate {self.plate}")


@dataclass(frozen=True)
class SiteLayout:
    """Lanes feeding the target link (upstream) and lanes on it (downstream)."""

    upstream_lanes: Tuple[str, ...]
    downstream_lanes: Tuple[str, ...]
    link_length: float
    free_flow_speed: float
    monitored: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "upstream_lanes", tuple(self.upstream_lanes))
        object.__setattr__(self, "downstream_lanes", tuple(self.downstream_lanes))
        if not self.upstream_lanes or not self.downstream_lanes:
            raise ValueError("upstream and downstream lane sets must be non-empty")
        if set(self.upstream_lanes) & set(self.downstream_lanes):
            raise ValueError("upstream and downstream lane ids must be disjoint")
        if self.link_length <= 0 or self.free_flow_speed <= 0:
            raise ValueError("link_length and free_flow_speed must be positive")
        unknown = set(self.monitored) - set(self.lanes)
        if unknown:
            raise ValueError(f"monitored flags for undeclared lanes: {sorted(unknown)}")

    @property
    def lanes(self) -> Tuple[str, ...]:
        return self.upstream_lanes + self.downstream_lanes

    def is_monitored(self, lane: str) -> bool:
        return bool(self.monitored.get(lane, True))

    @property
    def monitored_upstream(self) -> Tuple[str, ...]:
        return tuple(l for l in self.upstream_lanes if self.is_monitored(l))

    @property
    def monitored_downstream(self) -> Tuple[str, ...]:
        return tuple(l for l in self.downstream_lanes if self.is_monitored(l))


@dataclass(frozen=True)
class SignalTiming:
    cycle_length: float
    cycle_origin: float = 0.0
    phases: Tuple[Tuple[str, float, float], ...] = ()

    def __post_init__(self):
        if self.cycle_length <= 0:
            raise ValueError("cycle_length must be positive")
        object.__setattr__(self, "phases", tuple(tuple(p) for p in self.phases))
        for label, start, end in self.phases:
            if not (0 <= start < self.cycle_length and 0 < end <= self.cycle_length and start < end):
                raise ValueError(f"phase {label!r} window ({start}, {end}) outside the cycle")

    def time_in_cycle(self, t):
        return np.mod(np.asarray(t, dtype=float) - self.cycle_origin, self.cycle_length)

    def phase_window(self, label: str) -> Tuple[float, float]:
        for name, start, end in self.phases:
            if name == label:
                return start, end
        raise KeyError(label)

    def phase_at(self, t: float) -> Optional[str]:
        tc = float(self.time_in_cycle(t))
        for name, start, end in self.phases:
            if start <= tc < end:
                return name
        return None

    def next_green(self, label: str, t: float) -> float:
        """Earliest time >= t at which phase ``label`` is showing green."""
        start, end = self.phase_window(label)
        k = np.floor((t - self.cycle_origin) / self.cycle_length)
        base = self.cycle_origin + k * self.cycle_length
        tc = t - base
        if tc < start:
            return base + start
        if tc < end:
            return t
        return base + self.cycle_length + start


@dataclass(frozen=True, eq=False)
class CumulativeCurve:
    """Time-ordered (timestamp, cumulative index) points.

    ``plates`` is kept for observed departure curves so matched plates can be
    resolved to their cumulative index.
    """

    times: np.ndarray
    values: np.ndarray
    kind: str = DEPARTURE
    lane: Optional[str] = None
    plates: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if times.shape != values.shape:
            raise ValueError("times and values must have the same length")
        if self.kind not in CURVE_KINDS:
            raise ValueError(f"unknown curve kind {self.kind!r}")
        if times.size > 1 and np.any(np.diff(times) < 0):
            raise ValueError("curve timestamps must be non-decreasing")
        if values.size > 1 and np.any(np.diff(values) < 0):
            raise ValueError("cumulative index must be non-decreasing")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if self.plates is not None:
            if len(self.plates) != times.size:
                raise ValueError("plates must align with points")
            object.__setattr__(self, "plates", tuple(self.plates))

    def __len__(self):
        return self.times.size

    @property
    def final(self) -> float:
        return float(self.values[-1]) if self.values.size else 0.0

    def index_of(self, plate: str) -> float:
        if self.plates is None:
            raise ValueError("curve carries no plate ids")
        if not hasattr(self, "_plate_index"):
            object.__setattr__(self, "_plate_index", {p: i for i, p in enumerate(self.plates)})
        return float(self.values[self._plate_index[plate]])

    def __eq__(self, other):
        if not isinstance(other, CumulativeCurve):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.lane == other.lane
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class MatchedVehiclePair:
    plate: str
    upstream_lane: str
    downstream_lane: str
    t_up: float
    t_down: float
    anchor: float


@dataclass
class MatchResult:
    pairs: List[MatchedVehiclePair]
    diagnostics: Counter = field(default_factory=Counter)

    def by_lane(self) -> Dict[str, List[MatchedVehiclePair]]:
        out: Dict[str, List[MatchedVehiclePair]] = {}
        for p in self.pairs:
            out.setdefault(p.downstream_lane, []).append(p)
        return out


def _ordered(records: Iterable[LprRecord]) -> List[LprRecord]:
    # ties broken by plate id
    return sorted(records, key=lambda r: (r.timestamp, r.plate))


def build_departure_curve(records: Sequence[LprRecord], lane: Optional[str] = None) -> CumulativeCurve:
    """Index one lane's detections 1..n in time order.

    Unrecognized records still count: the camera saw the vehicle even if the
    plate read failed.
    """
    lanes = {r.lane for r in records}
    if len(lanes) > 1:
        raise ValueError(f"records span several lanes: {sorted(lanes)}")
    if lane is None and lanes:
        lane = next(iter(lanes))
    recs = _ordered(records)
    times = np.array([r.timestamp for r in recs], dtype=float)
    values = np.arange(1, len(recs) + 1, dtype=float)
    return CumulativeCurve(times, values, DEPARTURE, lane, tuple(r.plate for r in recs))


def build_departure_curves(records: Sequence[LprRecord], lanes: Sequence[str]) -> Dict[str, CumulativeCurve]:
    grouped: Dict[str, List[LprRecord]] = {l: [] for l in lanes}
    for r in records:
        if r.lane in grouped:
            grouped[r.lane].append(r)
    return {l: build_departure_curve(grouped[l], lane=l) for l in lanes}


def _first_sightings(records: Iterable[LprRecord], diagnostics: Counter, side: str) -> Dict[str, LprRecord]:
    seen: Dict[str, LprRecord] = {}
    for r in _ordered(records):
        if not r.recognized:
            continue
        if r.plate in seen:
            diagnostics[f"duplicate_{side}"] += 1
            continue
        seen[r.plate] = r
    return seen


def match_plates(
    upstream: Sequence[LprRecord],
    downstream: Sequence[LprRecord],
    downstream_curves: Mapping[str, CumulativeCurve],
) -> MatchResult:
    """Pair plates recognized at both intersections.

    The anchor of a pair is the plate's cumulative departure index in its
    downstream lane, which under FIFO equals its lane-based arrival index.
    Pairs whose downstream time does not follow the upstream time are rejected
    and tallied under ``diagnostics['rejected_order']``.
    """
    diagnostics: Counter = Counter()
    up = _first_sightings(upstream, diagnostics, "upstream")
    down = _first_sightings(downstream, diagnostics, "downstream")
    pairs = []
    for plate, d in down.items():
        u = up.get(plate)
        if u is None:
            continue
        if not d.timestamp > u.timestamp:
            diagnostics["rejected_order"] += 1
            logger.debug("plate %s seen downstream at %.3f before upstream at %.3f", plate, d.timestamp, u.timestamp)
            continue
        curve = downstream_curves.get(d.lane)
        if curve is None:
            diagnostics["unknown_downstream_lane"] += 1
            continue
        pairs.append(MatchedVehiclePair(plate, u.lane, d.lane, u.timestamp, d.timestamp, curve.index_of(plate)))
    pairs.sort(key=lambda p: (p.downstream_lane, p.t_up, p.plate))
    diagnostics["matched"] = len(pairs)
    return MatchResult(pairs, diagnostics)


def link_arrival_curve(upstream_curves: Mapping[str, CumulativeCurve] | Sequence[CumulativeCurve]) -> CumulativeCurve:
    """Merge upstream lane departures into the link arrival curve S*(t)."""
    curves = list(upstream_curves.values()) if isinstance(upstream_curves, Mapping) else list(upstream_curves)
    if not curves:
        return CumulativeCurve([], [], LINK_ARRIVAL)
    times = np.concatenate([c.times for c in curves])
    steps = np.concatenate([np.diff(c.values, prepend=0.0) for c in curves])
    if times.size == 0:
        return CumulativeCurve([], [], LINK_ARRIVAL)
    order = np.argsort(times, kind="stable")
    times, steps = times[order], steps[order]
    uniq, start = np.unique(times, return_index=True)
    values = np.cumsum(steps)
    last = np.append(start[1:], times.size) - 1
    return CumulativeCurve(uniq, values[last], LINK_ARRIVAL)


def curve_value(curve: CumulativeCurve, t):
    """Right-continuous step evaluation; accepts scalars or arrays."""
    t_arr = np.asarray(t, dtype=float)
    idx = np.searchsorted(curve.times, t_arr, side="right")
    padded = np.concatenate(([0.0], curve.values))
    out = padded[idx]
    return float(out) if out.ndim == 0 else out


def accumulation_between(curve: CumulativeCurve, t_a, t_b):
    """Increment of the curve over (t_a, t_b]."""
    t_a = np.asarray(t_a, dtype=float)
    t_b = np.asarray(t_b, dtype=float)
    if np.any(t_a > t_b):
        raise ValueError("accumulation_between requires t_a <= t_b")
    return curve_value(curve, t_b) - curve_value(curve, t_a)


def shift_to_section(curve: CumulativeCurve, x: float, layout: SiteLayout) -> CumulativeCurve:
    """Translate an upstream-section curve to a section ``x`` metres downstream
    at free-flow speed."""
    if not 0 <= x <= layout.link_length:
        raise ValueError(f"x={x} outside [0, {layout.link_length}]")
    return CumulativeCurve(curve.times + x / layout.free_flow_speed, curve.values, curve.kind, curve.lane, curve.plates)


def read_records(path: str | Path) -> List[LprRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"plate", "lane", "timestamp", "recognized"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(
                LprRecord(
                    row["plate"],
                    row["lane"],
                    float(row["timestamp"]),
                    row["recognized"].strip().lower() in ("1", "true", "yes"),
                )
            )
    return out


def write_records(path: str | Path, records: Iterable[LprRecord]) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plate", "lane", "timestamp", "recognized"])
        for r in _ordered(records):
            w.writerow([r.plate, r.lane, f"{r.timestamp:.3f}", "1" if r.recognized else "0"])
            n += 1
    return n


def validate_lanes(records: Iterable[LprRecord], layout: SiteLayout) -> None:
    known = set(layout.lanes)
    bad = sorted({r.lane for r in records} - known)
    if bad:
        raise ValueError(f"records reference undeclared lanes: {bad}")
