"""Command line harness.

Subcommands: simulate | calibrate | detect | sweep | rabi | bench.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every CSV carries a header row plus a comment line with the
scenario config hash so outputs are traceable to their inputs.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import plot
from .cluster import reconstruct_uv
from .config import ScenarioConfig
from .discriminate import CalibrationModel, run_detection_sequence
from .errors import ConfigError, DataError, NumericalError, RotionError
from .events import read_events, write_events, write_sync
from .frame import RotationFrame, bin_image, derotate, write_pgm
from .locate import match_sites
from .pipeline import (build_calibration, materialize_cal_shots,
                       prepare_bundle, processed_pairs, run_bench, run_rabi,
                       run_sweep, simulate_pair, stream_rngs)


def _write_csv(path, rows, fieldnames, sha="", comments=()):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config {sha or 'none'}\n")
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _load_config(args):
    if not args.config:
        raise ConfigError("--config is required for this subcommand")
    cfg = ScenarioConfig.load(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_image(path_base, rgb_or_gray, fmt):
    if fmt == "pgm":
        arr = rgb_or_gray
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        write_pgm(f"{path_base}.pgm", arr)
        return f"{path_base}.pgm"
    plot.save_png(f"{path_base}.png", rgb_or_gray)
    return f"{path_base}.png"


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _outdir(args)
    bundle = prepare_bundle(cfg, with_timewalk=False)
    n = args.pairs or cfg.run.n_pairs
    rngs = stream_rngs(cfg.run.seed, "simulate", n)
    total = 0
    for i, rng in enumerate(rngs):
        pair = simulate_pair(bundle, rng)
        stem = out / f"pair{i:04d}"
        write_events(f"{stem}_ref.events", pair.ref_events)
        write_sync(f"{stem}_ref.sync", pair.ref_sync)
        write_events(f"{stem}_det.events", pair.det_events)
        write_sync(f"{stem}_det.sync", pair.det_sync)
        truth = {
            "config_sha": cfg.sha,
            "c_tpx": bundle.base_frame.c_tpx,
            "center_px": list(bundle.base_frame.center_px),
            "ref_t0_ns": pair.ref_truth.frame.t0_ns,
            "det_t0_ns": pair.det_truth.frame.t0_ns,
            "ref_exposure_s": pair.ref_truth.exposure_s,
            "det_exposure_s": pair.det_truth.exposure_s,
            "rest_sites_px": pair.ref_truth.rest_sites_px.tolist(),
            "det_initial_bright": pair.det_truth.initial_bright.astype(int).tolist(),
            "det_flip_time_s": [None if not np.isfinite(t) else t
                                for t in pair.det_truth.flip_time_s],
        }
        with open(f"{stem}_truth.json", "w") as fh:
            json.dump(truth, fh)
        total += len(pair.ref_events) + len(pair.det_events)
        print(f"pair {i}: ref {len(pair.ref_events)} events, "
              f"det {len(pair.det_events)} events")
    print(f"wrote {n} pairs, {total} events total -> {out}")
    return 0


def _calibrate(cfg, bundle, threads, rois=()):
    cal_shots = materialize_cal_shots(bundle, cfg.run.seed, threads=threads)
    models = {}
    for roi in set(rois) | {cfg.detection.roi_radius_px}:
        models[roi] = build_calibration(bundle, roi_radius_px=roi,
                                        cal_shots=cal_shots)
    return models


def cmd_calibrate(args):
    cfg = _load_config(args)
    out = _outdir(args)
    bundle = prepare_bundle(cfg)
    models = _calibrate(cfg, bundle, args.threads)
    model = models[cfg.detection.roi_radius_px]
    model.save(out / "calibration.json")
    bundle.timewalk.save(out / "timewalk.txt")
    print(f"calibration -> {out / 'calibration.json'}")
    for r in np.linspace(model.r_min_px, model.r_max_px, 5):
        lam_b, lam_d, tau_b, tau_d, _ = model.rates_for(r, cfg.detection)
        print(f"  r={r:6.1f} px  rate_b={lam_b:7.2f}/bin  rate_d={lam_d:6.2f}"
              f"/bin  tau_b={tau_b * 1e3:7.1f} ms  tau_d={tau_d * 1e3:6.1f} ms")
    return 0


def cmd_detect(args):
    cfg = _load_config(args)
    out = _outdir(args)
    bundle = prepare_bundle(cfg)
    if args.calibration:
        calib = CalibrationModel.load(args.calibration)
    else:
        calib = _calibrate(cfg, bundle, args.threads)[cfg.detection.roi_radius_px]
    det = cfg.detection
    n = args.pairs or cfg.run.n_pairs
    rngs = stream_rngs(cfg.run.seed, "detect", n)
    rows = []
    rejected = 0
    first_image = None
    for i, (pair, ref_pts, det_pts) in enumerate(processed_pairs(
            bundle, rngs, "mixed", det_exposure_s=det.total_time_s,
            locate_center=cfg.run.find_center, threads=args.threads)):
        try:
            result = run_detection_sequence(
                ref_pts, det_pts, calib, det, expected_n_ions=bundle.n_ions,
                min_recall_fraction=cfg.run.min_recall_fraction)
        except DataError as exc:
            print(f"shot {i} rejected: {exc}", file=sys.stderr)
            rejected += 1
            continue
        match = match_sites([[s.x, s.y] for s in result.sites],
                            pair.det_truth.rest_sites_px, match_radius_px=3.0)
        truth_by_site = {int(si): bool(pair.det_truth.initial_bright[ti])
                         for si, ti in match.pairs}
        for j, (site, call) in enumerate(zip(result.sites, result.calls)):
            truth = truth_by_site.get(j)
            rows.append({
                "shot": i, "site": j, "x_px": round(site.x, 3),
                "y_px": round(site.y, 3),
                "radius_px": round(call.orbit_radius, 3),
                "state": "bright" if call.bright else "dark",
                "log_odds": round(call.log_odds, 4),
                "radius_clamped": int(call.radius_clamped),
                "truth": "" if truth is None else ("bright" if truth else "dark"),
            })
        if first_image is None and args.format != "csv":
            image = bin_image(det_pts)
            markers = [(s.x - image.x0, s.y - image.y0,
                        (220, 40, 40) if c.bright else (60, 90, 230))
                       for s, c in zip(result.sites, result.calls)]
            first_image = plot.annotate_image(image.counts, markers)
    _write_csv(out / "states.csv", rows,
               ["shot", "site", "x_px", "y_px", "radius_px", "state",
                "log_odds", "radius_clamped", "truth"], cfg.sha,
               [f"rejected_shots {rejected}"])
    if first_image is not None:
        name = _save_image(out / "detect_annotated", first_image, args.format)
        print(f"annotated shot -> {name}")
    judged = [r for r in rows if r["truth"]]
    if judged:
        ok = sum(r["state"] == r["truth"] for r in judged)
        print(f"truth agreement: {ok}/{len(judged)} = {ok / len(judged):.4f}")
    print(f"detect: {len(rows)} state calls over {n - rejected} accepted "
          f"shots ({rejected} rejected) -> {out / 'states.csv'}")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args)
    out = _outdir(args)
    bundle = prepare_bundle(cfg)
    calibs = _calibrate(cfg, bundle, args.threads, rois=cfg.run.sweep_roi_px)
    result = run_sweep(bundle, calibs, threads=args.threads)
    rows = result.rows()
    _write_csv(out / "sweep.csv", rows,
               ["axis", "time_ms", "roi_px", "n_bins", "radius_lo",
                "radius_hi", "metric", "value", "n"], cfg.sha,
               [f"pairs {result.n_pairs}", f"rejected {result.n_rejected}"])
    print(f"sweep -> {out / 'sweep.csv'} ({len(rows)} rows, "
          f"{result.n_rejected} rejected pairs)")
    for roi in result.roi_px:
        vals = [result.f_time[(t, roi)].f_avg for t in result.times_ms]
        line = "  ".join(f"{t:g}ms={v:.4f}" for t, v in zip(result.times_ms, vals))
        print(f"  roi {roi:g} px: {line}")
    if args.format != "csv":
        series = [(f"roi {roi:g}", result.times_ms,
                   [result.f_time[(t, roi)].f_avg for t in result.times_ms])
                  for roi in result.roi_px]
        img = plot.line_chart(series, title="fidelity vs detection time",
                              xlabel="time ms", ylabel="f")
        _save_image(out / "sweep_time", img, args.format)
        series = [("bins", result.nbins,
                   [result.f_bins[nb].f_avg for nb in result.nbins])]
        img = plot.line_chart(series, title="fidelity vs bin count",
                              xlabel="bins", ylabel="f")
        _save_image(out / "sweep_bins", img, args.format)
        grid = np.array([[result.f_radius[(t, k)].f_avg
                          for k in range(len(result.radius_edges) - 1)]
                         for t in result.times_ms])
        img = plot.heatmap(grid, title="fidelity: time x radius")
        _save_image(out / "sweep_radius", img, args.format)
    return 0


def cmd_rabi(args):
    cfg = _load_config(args)
    out = _outdir(args)
    bundle = prepare_bundle(cfg)
    calib = _calibrate(cfg, bundle, args.threads)[cfg.detection.roi_radius_px]
    points, fit = run_rabi(bundle, calib, threads=args.threads)
    rows = [{"duration_us": p.pulse_duration_s * 1e6,
             "p_up": round(p.p_up, 5), "n_ions": p.n} for p in points]
    _write_csv(out / "rabi.csv", rows, ["duration_us", "p_up", "n_ions"],
               cfg.sha,
               [f"fit freq_hz {fit.freq_hz:.3f} +- {fit.freq_err_hz:.3f}",
                f"fit contrast {fit.contrast:.4f} +- {2 * fit.amplitude_err:.4f}",
                f"fit offset {fit.offset:.4f} phase_rad {fit.phase_rad:.4f}"])
    print(f"rabi fit: f = {fit.freq_hz:.1f} Hz (err {fit.freq_err_hz:.1f}), "
          f"contrast = {fit.contrast:.3f}, offset = {fit.offset:.3f}")
    if args.format != "csv":
        tt = np.linspace(0.0, max(p.pulse_duration_s for p in points), 200)
        model = fit.offset + fit.amplitude * np.cos(
            2 * np.pi * fit.freq_hz * tt + fit.phase_rad)
        series = [("data", [p.pulse_duration_s * 1e6 for p in points],
                   [p.p_up for p in points]),
                  ("fit", tt * 1e6, model)]
        img = plot.line_chart(series, title="rabi scan", xlabel="us",
                              ylabel="p up", ylim=(0.0, 1.05))
        _save_image(out / "rabi", img, args.format)
    print(f"rabi -> {out / 'rabi.csv'}")
    return 0


def cmd_bench(args):
    out = _outdir(args)
    sha = ""
    if args.events:
        import time as _time
        events, _tick_ns = read_events(args.events)
        warm = events.take(np.arange(min(50_000, len(events))))
        frame = RotationFrame(omega_r=2 * np.pi * 25e3)
        derotate(reconstruct_uv(warm), frame)
        t0 = _time.perf_counter()
        uv = reconstruct_uv(events)
        t1 = _time.perf_counter()
        derotate(uv, frame)
        t2 = _time.perf_counter()
        report = {"n_events": len(events), "n_uv": len(uv.x),
                  "cluster_s": t1 - t0, "derotate_s": t2 - t1,
                  "elapsed_s": t2 - t0,
                  "events_per_s": len(events) / (t2 - t0)}
    else:
        n = args.bench_events
        rate = 5.5e6
        seed = args.seed if args.seed is not None else 0
        if args.config:
            cfg = _load_config(args)
            n = args.bench_events or cfg.run.bench_events
            rate = cfg.run.bench_rate_hz
            seed = cfg.run.seed
            sha = cfg.sha
        report = run_bench(n_events=n or 2_000_000, rate_hz=rate, seed=seed)
    row = {k: (f"{v:.6f}" if isinstance(v, float) else v)
           for k, v in report.items()}
    _write_csv(out / "bench.csv", [row], list(row.keys()), sha,
               ["timing fields vary between runs"])
    print(f"bench: {report['n_events']} events in {report['elapsed_s']:.4f} s "
          f"-> {report['events_per_s']:.3e} events/s "
          f"(cluster {report['cluster_s']:.4f} s, "
          f"derotate {report['derotate_s']:.4f} s)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rotion",
        description="Rotating ion crystal event processing harness")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario TOML file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    common.add_argument("--threads", type=int, default=1,
                        help="shot-level worker threads")
    common.add_argument("--format", choices=("csv", "pgm", "png"),
                        default="png", help="figure output format")

    p = sub.add_parser("simulate", parents=[common],
                       help="write raw event/sync/truth files")
    p.add_argument("--pairs", type=int, default=None)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("calibrate", parents=[common],
                       help="fit and persist rate/lifetime calibration")
    p.set_defaults(func=cmd_calibrate)
    p = sub.add_parser("detect", parents=[common],
                       help="run REF/DET state detection")
    p.add_argument("--calibration", help="existing calibration.json")
    p.add_argument("--pairs", type=int, default=None)
    p.set_defaults(func=cmd_detect)
    p = sub.add_parser("sweep", parents=[common],
                       help="fidelity vs time / bins / roi / radius")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("rabi", parents=[common], help="rabi scan + fit")
    p.set_defaults(func=cmd_rabi)
    p = sub.add_parser("bench", parents=[common],
                       help="cluster+derotate throughput")
    p.add_argument("--events", help="bench an existing .events file")
    p.add_argument("--bench-events", type=int, default=None,
                   help="synthetic stream size")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except RotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
