"""Command-line entry point: simulate, train, reconstruct, evaluate.

Exit codes: 0 success, 1 partial failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bacl import BAYESIAN, DETERMINISTIC, BaclModel, Hyperparameters, TrainingError, fit_lane_model
from .config import ConfigError, merged_defaults, read_config
from .curves import SignalTiming, SiteLayout, curve_value, read_records, write_records
from .experiment import VARIANTS, Protocol, observe, summarize, sweep
from .features import FEATURE_SETS, FULL, FeatureSpec, extract_training_samples
from .metrics import write_reports
from .plot import write_band_svg
from .reconstruct import (
    REALTIME,
    LanePredictor,
    ReconstructedCurve,
    historical_acr,
    replay,
    vehicle_count,
    write_count_csv,
    write_curve_csv,
)
from .seeding import substream, substream_int
from .simulator import SCENARIO_SCALE, GroundTruth, default_config, degrade_to_matching_rate, matchable_plates, simulate

log = logging.getLogger("lpr_acr")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---- site description -----------------------------------------------------

def site_to_dict(layout: SiteLayout, upstream_signal: SignalTiming, downstream_signal: SignalTiming) -> dict:
    sig = lambda s: {"cycle_length": s.cycle_length, "cycle_origin": s.cycle_origin, "phases": [list(p) for p in s.phases]}
    return {
        "layout": {
            "upstream_lanes": list(layout.upstream_lanes),
            "downstream_lanes": list(layout.downstream_lanes),
            "link_length": layout.link_length,
            "free_flow_speed": layout.free_flow_speed,
            "monitored": dict(sorted(layout.monitored.items())),
        },
        "upstream_signal": sig(upstream_signal),
        "downstream_signal": sig(downstream_signal),
    }


def site_from_dict(d: dict):
    sig = lambda s: SignalTiming(float(s["cycle_length"]), float(s["cycle_origin"]), tuple((p[0], float(p[1]), float(p[2])) for p in s["phases"]))
    lay = d["layout"]
    layout = SiteLayout(tuple(lay["upstream_lanes"]), tuple(lay["downstream_lanes"]), float(lay["link_length"]),
                        float(lay["free_flow_speed"]), dict(lay.get("monitored", {})))
    return layout, sig(d["upstream_signal"]), sig(d["downstream_signal"])


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _outdir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from exc
    return p


def _rate(text: str) -> float:
    try:
        r = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0 < r <= 1:
        raise argparse.ArgumentTypeError(f"matching rate {r} outside (0, 1]")
    return r


def _rate_list(text: str) -> List[float]:
    return [_rate(t) for t in text.replace(" ", "").split(",") if t]


def _seed_list(text: str) -> List[int]:
    text = text.strip()
    if ".." in text:
        a, b = text.split("..")
        seeds = list(range(int(a), int(b) + 1))
    else:
        seeds = [int(t) for t in text.replace(" ", "").split(",") if t]
    if len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError("seeds must be distinct")
    return seeds


def _name_list(text: str) -> List[str]:
    names = [t for t in text.replace(" ", "").split(",") if t]
    bad = [n for n in names if n not in VARIANTS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown model(s) {bad}; choose from {sorted(VARIANTS)}")
    return names


def _hyper(args) -> Hyperparameters:
    base = Hyperparameters()
    return replace(
        base,
        hidden=tuple(int(h) for h in args.hidden.split(",")) if args.hidden else base.hidden,
        epochs=args.epochs if args.epochs is not None else base.epochs,
        learning_rate=args.learning_rate if args.learning_rate is not None else base.learning_rate,
        predict_samples=args.samples if args.samples is not None else base.predict_samples,
    )


def _lane_file(lane: str) -> str:
    return "model_" + "".join(c if c.isalnum() else "_" for c in lane) + ".json"


# ---- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _outdir(args.out)
    cfg = default_config(seed=substream_int(args.seed, "simulate"), duration=args.duration, scenario=args.scenario)
    if args.merge_rate is not None:
        cfg = replace(cfg, midblock_merge_rate=args.merge_rate)
    truth, up, down = simulate(cfg)
    if args.matching_rate < 1.0:
        up, down = degrade_to_matching_rate(up, down, args.matching_rate, substream(args.seed, "degrade"))
    n_up = write_records(out / "upstream.csv", up)
    n_down = write_records(out / "downstream.csv", down)
    n_truth = truth.write_csv(out / "truth.csv")
    _dump_json(out / "site.json", site_to_dict(cfg.layout, cfg.upstream_signal, cfg.downstream_signal))
    n_match = len(matchable_plates(up, down))
    print(f"upstream_records={n_up} downstream_records={n_down} vehicles={n_truth} matchable={n_match}")
    return EXIT_OK


def _load_site(records: Path):
    site = records / "site.json"
    if site.exists():
        return site_from_dict(json.loads(site.read_text(encoding="utf-8")))
    cfg = default_config()
    return cfg.layout, cfg.upstream_signal, cfg.downstream_signal


def _load_period(records: Path):
    for name in ("upstream.csv", "downstream.csv"):
        if not (records / name).exists():
            raise UsageError(f"missing {records / name}")
    layout, up_sig, down_sig = _load_site(records)
    up = read_records(records / "upstream.csv")
    down = read_records(records / "downstream.csv")
    truth = GroundTruth.read_csv(records / "truth.csv") if (records / "truth.csv").exists() else None
    return observe(layout, up_sig, truth, up, down), up_sig


def cmd_train(args) -> int:
    out = _outdir(args.out)
    period, signal = _load_period(Path(args.records))
    spec = FeatureSpec(period.layout.monitored_upstream, args.feature_set)
    hyper = _hyper(args)
    truth_curves = period.truth_curves()
    hops = () if truth_curves is not None else tuple(range(2, 9))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        samples = extract_training_samples(
            period.pairs, period.upstream_curves, signal, spec, k_sub=args.k_sub,
            truth_curves=truth_curves, k_span=args.k_span if truth_curves is not None else 0,
            hops=hops, rng=substream(args.seed, "samples"),
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    mode = DETERMINISTIC if args.deterministic else BAYESIAN
    rows = []
    trained = 0
    for lane in sorted(samples):
        s = samples[lane]
        if len(s) < 1:
            print(f"warning: lane {lane} skipped (fewer than 2 matched vehicles)", file=sys.stderr)
            continue
        res = fit_lane_model(s, spec, hyper, mode, substream_int(args.seed, "train", lane), lane)
        res.model.save(out / _lane_file(lane))
        for e, loss in enumerate(res.loss_trace):
            v = res.val_trace[e] if e < len(res.val_trace) else float("nan")
            rows.append([lane, e, repr(float(loss)), repr(float(v))])
        trained += 1
        print(f"lane={lane} samples={len(s)} epochs={len(res.loss_trace)} best_epoch={res.best_epoch}")
    with open(out / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lane", "epoch", "loss", "val_nll"])
        w.writerows(rows)
    print(f"trained_lanes={trained} mode={mode}")
    return EXIT_OK


def _load_models(models_dir: Path, lanes: Sequence[str], n_samples: Optional[int]) -> Dict[str, LanePredictor]:
    out = {}
    for lane in lanes:
        path = models_dir / _lane_file(lane)
        if not path.exists():
            continue
        try:
            out[lane] = LanePredictor(BaclModel.load(path), n_samples)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad model artifact {path}: {exc}") from exc
    if not out:
        raise UsageError(f"no model artifacts found in {models_dir}")
    return out


def cmd_reconstruct(args) -> int:
    period, signal = _load_period(Path(args.records))
    models = _load_models(Path(args.models), period.layout.monitored_downstream, args.samples)
    curves, count_rows, closed = [], [], []
    status = EXIT_OK
    for lane, pairs in period.pairs.items():
        if lane not in models:
            print(f"warning: no model for lane {lane}", file=sys.stderr)
            status = EXIT_PARTIAL
            continue
        if args.mode == "historical":
            if len(pairs) < 2:
                print(f"warning: lane {lane} has fewer than 2 matched vehicles", file=sys.stderr)
                status = EXIT_PARTIAL
                continue
            rc = historical_acr(lane, pairs, period.upstream_curves, models[lane], signal, args.grid_step)
            curves.append(rc)
        else:
            end = max((float(c.times[-1]) for c in period.upstream_curves.values() if len(c)), default=0.0)
            qs = np.arange(args.cadence, end + args.cadence, args.cadence)
            state = replay(lane, pairs, period.upstream_curves, models[lane], signal, qs)
            if state.emitted:
                e = state.emitted
                rc = ReconstructedCurve(
                    lane, np.array([x.t for x in e]), np.array([x.mean for x in e]),
                    np.array([x.var_epistemic for x in e]), np.array([x.var_aleatoric for x in e]),
                    np.zeros(len(e), dtype=bool), REALTIME, tuple(state.anchors),
                )
                curves.append(rc)
                counts = vehicle_count(rc.mean, rc.var_total, period.downstream_curves[lane], rc.times)
                g = period.truth.vehicle_count(lane, rc.times) if period.truth is not None else np.full(rc.times.size, np.nan)
                count_rows += [(lane, t, c, v, gt) for t, c, v, gt in zip(rc.times, counts.mean, counts.var, g)]
            print(f"lane={lane} emitted={len(state.emitted)} warm_up={state.tally['warm_up']} "
                  f"out_of_order={state.tally['out_of_order']} duplicate={state.tally['duplicate']}")
            if len(state.anchors) >= 2:
                closed.append(state.historical(args.grid_step))
    n = write_curve_csv(args.out, curves)
    if args.closed_gaps:
        write_curve_csv(args.closed_gaps, closed)
    if args.counts and count_rows:
        write_count_csv(args.counts, count_rows)
    if args.svg:
        truth = {c.lane: period.truth.arrival_curve(c.lane) for c in curves} if period.truth is not None else None
        write_band_svg(args.svg, curves, truth, f"{args.mode} reconstruction")
    print(f"rows={n} lanes={len(curves)} mode={args.mode}")
    return status


def cmd_evaluate(args) -> int:
    protocol = Protocol(
        scenario=args.scenario,
        train_duration=args.train_duration,
        test_duration=args.test_duration,
        grid_step=args.grid_step,
        hyper=_hyper(args),
    )
    t0 = time.perf_counter()
    results = sweep(args.rates, args.seeds, args.models, protocol, jobs=args.jobs)
    reports = summarize(results)
    write_reports(args.out, reports)
    if args.cells:
        with open(args.cells, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "matching_rate", "seed", "rmse", "crps", "coverage", "n", "error"])
            for r in results:
                w.writerow([r.variant, f"{r.matching_rate:g}", r.seed, repr(r.rmse), repr(r.crps), repr(r.coverage), r.n, r.error])
    failed = [r for r in results if r.error]
    for r in reports:
        print(",".join(r.row()))
    print(f"cells={len(results)} failed={len(failed)} elapsed={time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


# ---- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpr-acr", description="Lane-based arrival curve reconstruction from LPR data.")
    p.add_argument("--config", help="key=value config file; LPR_ACR_<KEY> environment variables override it")
    p.add_argument("--seed", type=int, default=0, help="root seed for every random stream (default 0)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def model_opts(sp):
        sp.add_argument("--hidden", default=None, help="hidden widths, e.g. 32,32")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--learning-rate", type=float, default=None)
        sp.add_argument("--samples", type=int, default=None, help="Monte-Carlo weight draws at prediction (M)")

    s = sub.add_parser("simulate", help="simulate a corridor and write LPR records plus ground truth")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--duration", type=float, default=3600.0)
    s.add_argument("--scenario", default="pm_peak", choices=sorted(SCENARIO_SCALE))
    s.add_argument("--matching-rate", type=_rate, default=1.0)
    s.add_argument("--merge-rate", type=float, default=None, help="mid-block merges per hour")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one model per downstream lane")
    t.add_argument("--records", required=True, help="directory with upstream.csv, downstream.csv [, truth.csv, site.json]")
    t.add_argument("--out", required=True, help="directory for model artifacts and loss_trace.csv")
    t.add_argument("--deterministic", action="store_true", help="train the deterministic LC-NN instead")
    t.add_argument("--feature-set", default=FULL, choices=FEATURE_SETS)
    t.add_argument("--k-sub", type=int, default=3)
    t.add_argument("--k-span", type=int, default=3)
    model_opts(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="historical or real-time reconstruction")
    r.add_argument("--records", required=True)
    r.add_argument("--models", required=True, help="directory of model artifacts")
    r.add_argument("--out", required=True, help="reconstruction CSV")
    r.add_argument("--mode", choices=["historical", "realtime"], default="historical")
    r.add_argument("--grid-step", type=float, default=1.0)
    r.add_argument("--cadence", type=float, default=10.0, help="real-time query interval in seconds")
    r.add_argument("--counts", default=None, help="real-time vehicle-count CSV")
    r.add_argument("--closed-gaps", default=None, help="real-time: also write historical reconstruction of closed gaps")
    r.add_argument("--svg", default=None, help="write a band plot")
    r.add_argument("--samples", type=int, default=None)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="matching-rate x seed sweep on simulated data")
    e.add_argument("--out", required=True, help="report CSV")
    e.add_argument("--cells", default=None, help="per-cell CSV")
    e.add_argument("--rates", type=_rate_list, default=_rate_list("0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"))
    e.add_argument("--seeds", type=_seed_list, default=_seed_list("0..9"), help="e.g. 0..9 or 1,5,7")
    e.add_argument("--models", type=_name_list, default=_name_list("bacl,lcnn"))
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--scenario", default="pm_peak", choices=sorted(SCENARIO_SCALE))
    e.add_argument("--train-duration", type=float, default=Protocol.train_duration)
    e.add_argument("--test-duration", type=float, default=Protocol.test_duration)
    e.add_argument("--grid-step", type=float, default=1.0)
    model_opts(e)
    e.set_defaults(func=cmd_evaluate)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser, argv) -> None:
    """Overlay config-file and environment defaults onto the chosen subcommand."""
    pre, _ = parser.parse_known_args(argv)
    sp = _subparser(parser, pre.command)
    known = {a.dest for a in sp._actions if a.dest not in ("help", "func")} | {"seed", "log_level"}
    file_values = read_config(pre.config) if pre.config else {}
    values = merged_defaults(known, file_values)
    top = {k: v for k, v in values.items() if k in ("seed", "log_level")}
    rest = {k: v for k, v in values.items() if k not in top}
    for action in sp._actions:
        if action.dest in rest and isinstance(action, argparse._StoreTrueAction):
            rest[action.dest] = rest[action.dest].lower() in ("1", "true", "yes", "on")
    if top:
        parser.set_defaults(**top)
    if rest:
        sp.set_defaults(**rest)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    if isinstance(args.seed, str):
        args.seed = int(args.seed)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
