"""Two-intersection corridor simulator producing LPR detections and ground truth.

Vehicles leave the upstream lanes as a Poisson stream inside each lane's
signal phase, choose a downstream lane on entry, travel the link with a
lognormal travel time and are released at the downstream stop bar in FIFO
order at the saturation headway while their phase shows green. Mid-block
merges join the link without any upstream record.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .curves import (
    DEPARTURE,
    LANE_ARRIVAL,
    CumulativeCurve,
    LprRecord,
    SignalTiming,
    SiteLayout,
    curve_value,
)

MERGE = "merge"


@dataclass(frozen=True)
class SimConfig:
    layout: SiteLayout
    upstream_signal: SignalTiming
    downstream_signal: SignalTiming
    # upstream lane -> phase label -> veh/h; label "*" means all times
    demand: Mapping[str, Mapping[str, float]]
    # upstream lane (or "merge") -> downstream lane -> probability
    lane_choice: Mapping[str, Mapping[str, float]]
    # downstream lane -> phase label of its green
    downstream_green: Mapping[str, str]
    # upstream phase -> partial lane_choice override
    phase_lane_choice: Mapping[str, Mapping[str, Mapping[str, float]]] = field(default_factory=dict)
    seed: int = 0
    duration: float = 3600.0
    travel_time_median: float = 60.0
    travel_time_dispersion: float = 0.25
    midblock_merge_rate: float = 0.0
    recognition_up: float = 1.0
    recognition_down: float = 1.0
    matching_rate: float = 1.0
    saturation_headway: float = 2.0

    def __post_init__(self):
        for lane, rates in self.demand.items():
            if lane not in self.layout.upstream_lanes:
                raise ValueError(f"demand for undeclared upstream lane {lane!r}")
            if any(r < 0 for r in rates.values()):
                raise ValueError(f"negative demand on {lane!r}")
        if self.midblock_merge_rate < 0 or self.duration < 0:
            raise ValueError("rates and duration must be non-negative")
        for p in (self.recognition_up, self.recognition_down):
            if not 0 <= p <= 1:
                raise ValueError("recognition rates must lie in [0, 1]")
        if not 0 < self.matching_rate <= 1:
            raise ValueError("matching_rate must lie in (0, 1]")
        tables = [self.lane_choice] + list(self.phase_lane_choice.values())
        for table in tables:
            for src, row in table.items():
                _check_row(src, row, self.layout)
        for lane in self.layout.downstream_lanes:
            if lane not in self.downstream_green:
                raise ValueError(f"no downstream green phase for {lane!r}")
            self.downstream_signal.phase_window(self.downstream_green[lane])

    def with_overrides(self, **kw) -> "SimConfig":
        return replace(self, **kw)


def _check_row(src, row, layout):
    if any(not 0 <= p <= 1 for p in row.values()):
        raise ValueError(f"lane choice probabilities for {src!r} outside [0, 1]")
    if abs(sum(row.values()) - 1.0) > 1e-9:
        raise ValueError(f"lane choice row {src!r} sums to {sum(row.values())}, not 1")
    unknown = set(row) - set(layout.downstream_lanes)
    if unknown:
        raise ValueError(f"lane choice row {src!r} names unknown lanes {sorted(unknown)}")


@dataclass(frozen=True)
class GroundTruth:
    plate: np.ndarray
    up_lane: np.ndarray  # "" for merges
    down_lane: np.ndarray
    entry_time: np.ndarray
    depart_time: np.ndarray
    merge: np.ndarray

    def __len__(self):
        return self.plate.size

    def _lane_mask(self, lane):
        return self.down_lane == lane

    def arrival_curve(self, lane: str) -> CumulativeCurve:
        """True lane-based arrival curve at the upstream section of the link."""
        t = np.sort(self.entry_time[self._lane_mask(lane)])
        return CumulativeCurve(t, np.arange(1, t.size + 1), LANE_ARRIVAL, lane)

    def departure_curve(self, lane: str) -> CumulativeCurve:
        t = np.sort(self.depart_time[self._lane_mask(lane)])
        return CumulativeCurve(t, np.arange(1, t.size + 1), DEPARTURE, lane)

    def vehicle_count(self, lane: str, t):
        return curve_value(self.arrival_curve(lane), t) - curve_value(self.departure_curve(lane), t)

    def write_csv(self, path: str | Path) -> int:
        order = np.lexsort((self.plate, self.entry_time))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["plate", "up_lane", "down_lane", "entry_time", "depart_time", "merge_flag"])
            for i in order:
                w.writerow([
                    self.plate[i], self.up_lane[i], self.down_lane[i],
                    f"{self.entry_time[i]:.3f}", f"{self.depart_time[i]:.3f}", int(self.merge[i]),
                ])
        return int(order.size)

    @classmethod
    def read_csv(cls, path: str | Path) -> "GroundTruth":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            np.array([r["plate"] for r in rows], dtype=object),
            np.array([r["up_lane"] for r in rows], dtype=object),
            np.array([r["down_lane"] for r in rows], dtype=object),
            np.array([float(r["entry_time"]) for r in rows]),
            np.array([float(r["depart_time"]) for r in rows]),
            np.array([r["merge_flag"] == "1" for r in rows], dtype=bool),
        )


def _poisson_in_windows(rng, rate_vph, windows):
    if rate_vph <= 0:
        return np.empty(0)
    out = []
    lam = rate_vph / 3600.0
    for a, b in windows:
        n = rng.poisson(lam * (b - a))
        if n:
            out.append(rng.uniform(a, b, size=n))
    return np.concatenate(out) if out else np.empty(0)


def _phase_windows(signal: SignalTiming, label: str, duration: float):
    if label == "*":
        return [(0.0, duration)] if duration > 0 else []
    start, end = signal.phase_window(label)
    k0 = int(np.floor((0.0 - signal.cycle_origin) / signal.cycle_length)) - 1
    windows = []
    k = k0
    while True:
        base = signal.cycle_origin + k * signal.cycle_length
        if base + start >= duration:
            break
        a, b = max(base + start, 0.0), min(base + end, duration)
        if b > a:
            windows.append((a, b))
        k += 1
    return windows


def _choice_row(config: SimConfig, source: str, phase: Optional[str]) -> Mapping[str, float]:
    if phase is not None:
        override = config.phase_lane_choice.get(phase, {})
        if source in override:
            return override[source]
    if source in config.lane_choice:
        return config.lane_choice[source]
    lanes = config.layout.downstream_lanes
    return {l: 1.0 / len(lanes) for l in lanes}


def simulate(config: SimConfig) -> Tuple[GroundTruth, List[LprRecord], List[LprRecord]]:
    """Run one seeded corridor simulation.

    Returns the ground truth and the upstream and downstream LPR records.
    """
    rng = np.random.default_rng(config.seed)
    layout = config.layout
    down_lanes = list(layout.downstream_lanes)

    sources, entries = [], []
    for lane in layout.upstream_lanes:
        for label, rate in sorted(config.demand.get(lane, {}).items()):
            t = _poisson_in_windows(rng, rate, _phase_windows(config.upstream_signal, label, config.duration))
            entries.append(t)
            sources.extend([lane] * t.size)
    merges = _poisson_in_windows(rng, config.midblock_merge_rate, [(0.0, config.duration)] if config.duration > 0 else [])
    entries.append(merges)
    sources.extend([MERGE] * merges.size)

    entry = np.round(np.concatenate(entries) if entries else np.empty(0), 3)
    source = np.array(sources, dtype=object)
    order = np.argsort(entry, kind="stable")
    entry, source = entry[order], source[order]
    n = entry.size

    down = np.empty(n, dtype=object)
    for i in range(n):
        phase = config.upstream_signal.phase_at(entry[i]) if source[i] != MERGE else None
        row = _choice_row(config, source[i], phase)
        lanes = [l for l in down_lanes if row.get(l, 0.0) > 0]
        probs = np.array([row[l] for l in lanes])
        down[i] = lanes[rng.choice(len(lanes), p=probs / probs.sum())] if lanes else down_lanes[0]

    travel = rng.lognormal(np.log(config.travel_time_median), config.travel_time_dispersion, size=n)
    depart = np.empty(n)
    h = config.saturation_headway
    for lane in down_lanes:
        idx = np.flatnonzero(down == lane)
        phase = config.downstream_green[lane]
        last_stop = -np.inf
        last_dep = -np.inf
        for i in idx:  # entry order; no overtaking on the link
            stop = max(entry[i] + travel[i], last_stop)
            dep = config.downstream_signal.next_green(phase, max(stop, last_dep + h))
            depart[i] = round(dep, 3)
            last_stop, last_dep = stop, dep

    plates = np.array([f"V{config.seed % 100000:05d}-{i:06d}" for i in range(n)], dtype=object)
    merge_flag = source == MERGE
    truth = GroundTruth(
        plates,
        np.where(merge_flag, "", source).astype(object),
        down,
        entry,
        depart,
        merge_flag,
    )

    rec_up = rng.random(n) < config.recognition_up
    rec_down = rng.random(n) < config.recognition_down
    upstream = [
        LprRecord(plates[i], source[i], float(entry[i]), bool(rec_up[i]))
        for i in range(n)
        if source[i] != MERGE and layout.is_monitored(source[i])
    ]
    downstream = [
        LprRecord(plates[i], down[i], float(depart[i]), bool(rec_down[i]))
        for i in range(n)
        if layout.is_monitored(down[i])
    ]
    return truth, upstream, downstream


def matchable_plates(upstream: Sequence[LprRecord], downstream: Sequence[LprRecord]) -> List[str]:
    up = {r.plate for r in upstream if r.recognized}
    return sorted(r.plate for r in downstream if r.recognized and r.plate in up)


def degrade_to_matching_rate(
    upstream: Sequence[LprRecord],
    downstream: Sequence[LprRecord],
    target_rate: float,
    rng: np.random.Generator,
) -> Tuple[List[LprRecord], List[LprRecord]]:
    """Flip recognition flags so that ``round(target_rate * n)`` of the ``n``
    currently matchable plates stay matchable.

    Each dropped plate loses its read at one camera, picked at random.
    """
    if not 0 < target_rate <= 1:
        raise ValueError("target_rate must lie in (0, 1]")
    plates = matchable_plates(upstream, downstream)
    keep = int(round(target_rate * len(plates)))
    if keep >= len(plates):
        return list(upstream), list(downstream)
    dropped = rng.permutation(len(plates))[keep:]
    sides = rng.random(dropped.size) < 0.5
    drop_up = {plates[i] for i, s in zip(dropped, sides) if s}
    drop_down = {plates[i] for i, s in zip(dropped, sides) if not s}
    up = [replace(r, recognized=False) if r.plate in drop_up else r for r in upstream]
    down = [replace(r, recognized=False) if r.plate in drop_down else r for r in downstream]
    return up, down


def default_config(seed: int = 0, duration: float = 3600.0, scenario: str = "pm_peak", **overrides) -> SimConfig:
    """Built-in corridor: four feeder lanes (right turn unmonitored) onto a
    three-lane link, 120 s cycles at both intersections."""
    layout = SiteLayout(
        upstream_lanes=("up:LT", "up:TH1", "up:TH2", "up:RT"),
        downstream_lanes=("down:LT", "down:TH1", "down:TH2"),
        link_length=500.0,
        free_flow_speed=12.0,
        monitored={"up:RT": False},
    )
    upstream_signal = SignalTiming(120.0, 0.0, (("EW_TH", 0.0, 45.0), ("NS_LT", 50.0, 70.0), ("NS_TH", 75.0, 115.0)))
    downstream_signal = SignalTiming(120.0, 55.0, (("TH", 0.0, 55.0), ("LT", 60.0, 85.0)))
    scale = SCENARIO_SCALE[scenario]
    demand = {
        "up:TH1": {"EW_TH": 1000.0 * scale},
        "up:TH2": {"EW_TH": 850.0 * scale},
        "up:LT": {"NS_LT": 800.0 * scale},
        "up:RT": {"NS_TH": 200.0 * scale, "NS_LT": 100.0 * scale},
    }
    lane_choice = {
        "up:LT": {"down:LT": 0.75, "down:TH1": 0.20, "down:TH2": 0.05},
        "up:TH1": {"down:LT": 0.15, "down:TH1": 0.75, "down:TH2": 0.10},
        "up:TH2": {"down:LT": 0.03, "down:TH1": 0.12, "down:TH2": 0.85},
        "up:RT": {"down:LT": 0.02, "down:TH1": 0.18, "down:TH2": 0.80},
        MERGE: {"down:LT": 0.10, "down:TH1": 0.30, "down:TH2": 0.60},
    }
    cfg = SimConfig(
        layout=layout,
        upstream_signal=upstream_signal,
        downstream_signal=downstream_signal,
        demand=demand,
        lane_choice=lane_choice,
        downstream_green={"down:LT": "LT", "down:TH1": "TH", "down:TH2": "TH"},
        seed=seed,
        duration=duration,
        midblock_merge_rate=30.0 * scale,
    )
    return replace(cfg, **overrides) if overrides else cfg


SCENARIO_SCALE = {"pm_peak": 1.0, "off_peak": 0.6, "am_peak": 0.9}
