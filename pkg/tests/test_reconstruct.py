import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpr_acr.bacl import PredictiveDistribution
from lpr_acr.curves import LprRecord, MatchedVehiclePair, SignalTiming, build_departure_curve
from lpr_acr.experiment import linear_interpolation
from lpr_acr.features import FeatureSpec
from lpr_acr.reconstruct import (
    Anchor,
    RealtimeState,
    boundary_scale,
    grid_between,
    historical_acr,
    realtime_acr,
    replay,
    taper,
    vehicle_count,
    write_count_csv,
    write_curve_csv,
)

SIG = SignalTiming(120.0, 0.0, (("G", 0.0, 60.0),))
SPEC = FeatureSpec(("up:A",))


class ShareStub:
    """Predicts ``share`` x upstream accumulation with fixed variances."""

    spec = SPEC

    def __init__(self, share=0.5, epi=0.2, alea=0.3):
        self.share, self.epi, self.alea = share, epi, alea

    def __call__(self, X):
        m = self.share * X[:, 0]
        return PredictiveDistribution(m, m, np.full(len(m), self.epi), np.full(len(m), self.alea), 10)


class ZeroStub(ShareStub):
    def __call__(self, X):
        z = np.zeros(len(X))
        return PredictiveDistribution(z, z, z + 0.1, z + 0.1, 10)


UP = {"up:A": build_departure_curve([LprRecord(f"A{i}", "up:A", float(t)) for i, t in enumerate(np.arange(1, 2000, 2.5))], lane="up:A")}


def pair(i, t_up, anchor, t_down=None):
    return MatchedVehiclePair(f"P{i}", "up:A", "down:X", t_up, t_up + 60.0 if t_down is None else t_down, float(anchor))


anchor_lists = st.lists(st.tuples(st.floats(0.3, 80.0), st.integers(0, 6)), min_size=2, max_size=15).map(
    lambda steps: [Anchor(float(t), float(a)) for t, a in zip(np.cumsum([s[0] for s in steps]), np.cumsum([s[1] for s in steps]) + 1)]
)


class TestHelpers:
    def test_boundary_scale(self):
        assert boundary_scale(4.0, 2.0) == 2.0
        assert boundary_scale(0.0, 0.0) == 0.0
        assert boundary_scale(3.0, 1e-9) is None

    def test_taper(self):
        np.testing.assert_allclose(taper(np.array([0.0, 0.5, 1.0])), [0.0, 1.0, 0.0])

    def test_grid_between(self):
        assert grid_between(10.2, 13.0, 1.0).tolist() == [11.0, 12.0]
        assert grid_between(10.0, 11.0, 1.0).size == 0
        assert grid_between(0.0, 1.0, 0.25).tolist() == [0.25, 0.5, 0.75]


class TestHistorical:
    @settings(max_examples=40, deadline=None)
    @given(anchor_lists, st.floats(0.05, 3.0))
    def test_anchor_exact_and_monotone(self, anchors, share):
        rc = historical_acr("down:X", anchors, UP, ShareStub(share), SIG, 1.0)
        for a in anchors:
            hit = (rc.times == a.t) & rc.is_anchor
            assert np.all(np.abs(rc.mean[hit] - a.index) <= 1e-9)
        assert np.all(np.diff(rc.mean) >= -1e-12)
        assert np.all(np.diff(rc.times) > 0)
        assert np.all(rc.var_total[rc.is_anchor] == 0)
        assert np.all(rc.var_total >= 0)

    @settings(max_examples=25, deadline=None)
    @given(anchor_lists)
    def test_mean_within_anchor_bounds(self, anchors):
        rc = historical_acr("down:X", anchors, UP, ShareStub(0.7), SIG, 0.5)
        assert rc.mean.min() >= anchors[0].index and rc.mean.max() <= anchors[-1].index

    def test_lambda_fallback_linear(self):
        a = [Anchor(10.0, 1.0), Anchor(20.0, 6.0)]
        rc = historical_acr("down:X", a, UP, ZeroStub(), SIG, 1.0)
        assert rc.diagnostics["lambda_fallback"] == 1
        np.testing.assert_allclose(rc.mean[rc.times == 15.0], [3.5])

    def test_worked_gap(self):
        # share 1, accumulation grows 1 per 2.5 s; lambda rescales to the right anchor
        a = [Anchor(1.0, 1.0), Anchor(11.0, 3.0)]
        rc = historical_acr("down:X", a, UP, ShareStub(1.0), SIG, 1.0)
        assert rc.mean[-1] == 3.0
        lam = 2.0 / 4.0  # accumulation over (1, 11] is 4
        assert rc.mean[rc.times == 6.0][0] == pytest.approx(1.0 + lam * 2.0)
        v = rc.var_total[rc.times == 6.0][0]
        assert v == pytest.approx(lam**2 * 0.5 * 4 * 0.5 * 0.5)

    def test_degenerate_gaps_skipped(self):
        a = [Anchor(10.0, 1.0), Anchor(10.0, 2.0), Anchor(20.0, 5.0)]
        rc = historical_acr("down:X", a, UP, ShareStub(), SIG)
        assert rc.diagnostics["degenerate_gap"] == 1

    def test_needs_two_anchors(self):
        with pytest.raises(ValueError):
            historical_acr("down:X", [Anchor(1.0, 1.0)], UP, ShareStub(), SIG)

    def test_linear_baseline_exact_on_anchors(self):
        t, m, k = linear_interpolation([Anchor(0.0, 0.0), Anchor(10.0, 5.0)], 1.0)
        assert m[t == 4.0][0] == 2.0 and k.sum() == 2


class TestRealtime:
    def test_monotone_from_anchor(self):
        rc = realtime_acr("down:X", Anchor(10.0, 4.0), UP, ShareStub(0.4), SIG, [50.0, 11.0, 30.0])
        assert rc.times.tolist() == [11.0, 30.0, 50.0]
        assert np.all(np.diff(rc.mean) >= 0) and rc.mean[0] >= 4.0

    def test_rejects_past_queries(self):
        with pytest.raises(ValueError):
            realtime_acr("down:X", Anchor(10.0, 4.0), UP, ShareStub(), SIG, [5.0])

    def test_state_warm_up_and_tallies(self):
        s = RealtimeState("down:X", ShareStub(), UP, SIG)
        assert s.query(5.0) is None and s.tally["warm_up"] == 1
        assert s.re_anchor(Anchor(10.0, 1.0))
        assert not s.re_anchor(Anchor(10.0, 1.0))
        assert not s.re_anchor(Anchor(8.0, 0.0))
        assert s.tally == Counter(warm_up=1, duplicate=1, out_of_order=1)
        est = s.query(20.0)
        assert est.anchor == Anchor(10.0, 1.0) and est.mean >= 1.0

    def test_replay_uses_only_detected_pairs(self):
        pairs = [pair(0, 10.0, 1, 70.0), pair(1, 30.0, 4, 95.0), pair(2, 50.0, 7, 130.0)]
        st_ = replay("down:X", pairs, UP, ShareStub(), SIG, [60.0, 80.0, 100.0, 140.0])
        refs = [e.anchor.t for e in st_.emitted]
        assert refs == [10.0, 30.0, 50.0]  # t=60 is warm-up
        assert st_.tally["warm_up"] == 1

    @settings(max_examples=20, deadline=None)
    @given(anchor_lists)
    def test_stream_matches_batch(self, anchors):
        pairs = [pair(i, a.t, a.index) for i, a in enumerate(anchors)]
        st_ = replay("down:X", pairs, UP, ShareStub(), SIG, [])
        batch = historical_acr("down:X", pairs, UP, ShareStub(), SIG)
        stream = st_.historical()
        for f in ("times", "mean", "var_epistemic", "var_aleatoric", "is_anchor"):
            assert getattr(batch, f).tobytes() == getattr(stream, f).tobytes()


class TestCounts:
    def test_vehicle_count(self):
        dep = build_departure_curve([LprRecord("X", "down:X", 5.0)], lane="down:X")
        vc = vehicle_count(np.array([0.5, 3.0]), np.array([1.0, 1.0]), dep, np.array([6.0, 6.0]))
        assert vc.raw.tolist() == [-0.5, 2.0] and vc.mean.tolist() == [0.0, 2.0]

    def test_csv_writers(self, tmp_path):
        rc = historical_acr("down:X", [Anchor(1.0, 1.0), Anchor(4.0, 2.0)], UP, ShareStub(), SIG)
        n = write_curve_csv(tmp_path / "c.csv", [rc])
        rows = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert n == len(rows) == len(rc)
        assert float(rows[0]["mean"]) == 1.0 and rows[0]["mode"] == "historical"
        write_count_csv(tmp_path / "n.csv", [("down:X", 1.0, 2.0, 0.5, float("nan"))])
        assert open(tmp_path / "n.csv").read().splitlines()[1] == "down:X,1.0,2.0,0.5,"
