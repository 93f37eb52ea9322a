"""End-to-end runs over simulated data: shot processing, calibration
campaigns, fidelity measurements, parameter sweeps, Rabi scans and the
throughput benchmark.

Everything here is deterministic for a given scenario + seed: every shot
pair draws its random generator from a spawned seed sequence keyed by the
pair index, so results do not depend on evaluation order or thread count.
"""

import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .cluster import calibrate_timewalk, dbscan_cluster, reconstruct_uv
from .discriminate import (CalShot, DetectionParams, calibrate_lifetimes,
                           calibrate_rates, classify, measure_fidelity,
                           rabi_analysis, run_detection_sequence)
from .errors import ShotRejectionError
from .events import RawEvents, estimate_timebase, quantize_ns
from .frame import RotationFrame, bin_image, derotate, find_center
from .locate import detect_ions, match_sites
from .sim import simulate_experiment_pair, simulate_shot, solve_equilibrium

# spawn-key labels so independent stages never share a random stream
_STREAMS = {"timewalk": 1, "rate_bright": 2, "rate_dark": 3,
            "life_bright": 4, "life_dark": 5, "fid_bright": 6, "fid_dark": 7,
            "sweep": 8, "rabi": 9, "bench": 10, "detect": 11, "simulate": 12}


def stream_rngs(seed, stream, n):
    """n independent generators for one named stage of a run."""
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream]])
    return [np.random.default_rng(s) for s in ss.spawn(n)]


@dataclass
class ScenarioBundle:
    """A scenario ready to run: solved crystal plus shared models."""

    cfg: object
    crystal: object
    base_frame: RotationFrame
    timewalk: object = None

    @property
    def n_ions(self):
        return self.crystal.n_ions

    def radius_edges(self, n_bins):
        """Equal-population orbit-radius bin edges from the crystal truth."""
        r = self.crystal.radii_px
        edges = np.quantile(r, np.linspace(0.0, 1.0, n_bins + 1))
        edges[0] = 0.0
        edges[-1] = edges[-1] + 1.0
        return edges


def prepare_bundle(cfg, with_timewalk=True):
    crystal = solve_equilibrium(cfg.trap, seed=cfg.crystal_seed)
    bundle = ScenarioBundle(cfg=cfg, crystal=crystal, base_frame=cfg.base_frame())
    if with_timewalk:
        bundle.timewalk = build_timewalk_table(bundle)
    return bundle


def build_timewalk_table(bundle):
    """Calibrate the tot-dependent time correction from short bright shots."""
    cfg = bundle.cfg
    run = cfg.run
    rngs = stream_rngs(run.seed, "timewalk", run.timewalk_shots)
    period_cam_ns = 2e9 * math.pi / (bundle.base_frame.c_tpx
                                     * bundle.base_frame.omega_r)

    def shots():
        for rng in rngs:
            frame = replace(bundle.base_frame,
                            t0_ns=float(rng.uniform(0.0, period_cam_ns)))
            events, _, _ = simulate_shot(
                bundle.crystal, cfg.illumination, cfg.intensifier, frame,
                np.ones(bundle.n_ions, bool), run.timewalk_exposure_s, rng,
                sync_jitter_ns=run.sync_jitter_ns)
            labels, _ = dbscan_cluster(events)
            yield events, labels

    return calibrate_timewalk(shots())


def process_shot(events, sync, t0_ns, bundle, center_px=None,
                 locate_center=False):
    """Raw events + sync sidecar -> rest-frame photon positions.

    Follows the measured timebase, not the truth: the clock skew is
    re-estimated from this shot's own sync edges.
    """
    cfg = bundle.cfg
    tb = estimate_timebase(sync, cfg.trap.rotation_freq_hz)
    uv = reconstruct_uv(events, bundle.timewalk)
    frame = RotationFrame(omega_r=bundle.base_frame.omega_r, c_tpx=tb.c_tpx,
                          t0_ns=t0_ns,
                          center_px=cfg.center_px if center_px is None
                          else center_px)
    if locate_center:
        found = find_center(uv, frame, initial_guess=frame.center_px)
        frame = replace(frame, center_px=found.center_px)
    return derotate(uv, frame), tb


def simulate_pair(bundle, rng, prep="mixed", det_exposure_s=None,
                  ref_exposure_s=None):
    cfg = bundle.cfg
    run = cfg.run
    n = bundle.n_ions
    if prep == "bright":
        init = np.ones(n, bool)
    elif prep == "dark":
        init = np.zeros(n, bool)
    elif prep == "mixed":
        init = None
    else:                            # bright-state probability
        init = rng.random(n) < float(prep)
    return simulate_experiment_pair(
        bundle.crystal, cfg.illumination, cfg.intensifier, bundle.base_frame,
        rng, ref_exposure_s=ref_exposure_s or run.ref_exposure_s,
        det_exposure_s=det_exposure_s or run.det_exposure_s,
        dark_fraction=run.dark_fraction, det_initial_bright=init,
        sync_jitter_ns=run.sync_jitter_ns)


def _one_pair(bundle, rng, prep, det_exposure_s, ref_exposure_s,
              locate_center):
    pair = simulate_pair(bundle, rng, prep, det_exposure_s, ref_exposure_s)
    ref_pts, _ = process_shot(pair.ref_events, pair.ref_sync,
                              pair.ref_truth.frame.t0_ns, bundle,
                              locate_center=locate_center)
    det_pts, _ = process_shot(pair.det_events, pair.det_sync,
                              pair.det_truth.frame.t0_ns, bundle)
    return pair, ref_pts, det_pts


def processed_pairs(bundle, rngs, prep="mixed", det_exposure_s=None,
                    ref_exposure_s=None, locate_center=False, threads=1):
    """Yield (pair, ref_points, det_points) per spawned generator.

    With threads > 1 the pairs are simulated and processed concurrently but
    still yielded in order; per-pair generators keep the results identical
    either way.
    """
    if threads <= 1:
        for rng in rngs:
            yield _one_pair(bundle, rng, prep, det_exposure_s, ref_exposure_s,
                            locate_center)
        return
    from collections import deque
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = deque()
        for rng in rngs:
            pending.append(pool.submit(_one_pair, bundle, rng, prep,
                                       det_exposure_s, ref_exposure_s,
                                       locate_center))
            if len(pending) >= 2 * threads:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _sites_xy(sites):
    return np.array([[s.x, s.y] for s in sites], dtype=np.float64).reshape(-1, 2)


def _cal_shots(bundle, rngs, prep, det_exposure_s, min_sites, threads=1):
    """CalShot stream for calibration: localized REF sites + prepared DET."""
    for pair, ref_pts, det_pts in processed_pairs(bundle, rngs, prep,
                                                  det_exposure_s,
                                                  threads=threads):
        sites = detect_ions(bin_image(ref_pts), max_sites=bundle.n_ions)
        if len(sites) < min_sites:
            continue
        yield CalShot(points=det_pts, sites_xy=_sites_xy(sites))


def build_calibration(bundle, detection=None, roi_radius_px=None, seed=None,
                      cal_shots=None):
    """Run the full rate + lifetime calibration campaign for one ROI radius.

    cal_shots, when given, is a reusable tuple of materialized CalShot lists
    (rate_bright, rate_dark, life_bright, life_dark) so several ROI radii
    can be calibrated from the same simulated shots.
    """
    cfg = bundle.cfg
    run = cfg.run
    seed = run.seed if seed is None else seed
    det = detection or cfg.detection
    if roi_radius_px is not None:
        det = DetectionParams(bin_duration_s=det.bin_duration_s,
                              n_bins=det.n_bins, roi_radius_px=roi_radius_px)
    if cal_shots is None:
        cal_shots = materialize_cal_shots(bundle, seed)
    rate_b, rate_d, life_b, life_d = cal_shots

    model = calibrate_rates(rate_b, rate_d, det, degree=run.rate_poly_degree)
    n_life_bins = max(int(round(run.lifetime_exposure_s / det.bin_duration_s)), 2)
    life_params = DetectionParams(bin_duration_s=det.bin_duration_s,
                                  n_bins=n_life_bins,
                                  roi_radius_px=det.roi_radius_px)
    model = calibrate_lifetimes(life_b, life_d, life_params,
                                n_radius_bins=run.lifetime_radius_bins,
                                base=model)
    model.meta["config_sha"] = cfg.sha
    return model


def _reduce_points(points, sites_xy, keep_radius_px):
    """Drop photons farther than keep_radius_px from every site."""
    if len(points.x) == 0 or len(sites_xy) == 0:
        return points
    tree = cKDTree(sites_xy)
    d, _ = tree.query(np.column_stack([points.x, points.y]), k=1,
                      distance_upper_bound=keep_radius_px)
    return points.take(np.flatnonzero(np.isfinite(d)))


def materialize_cal_shots(bundle, seed, keep_radius_px=7.5, threads=1):
    """Simulate and cache the four calibration shot sets.

    Only photons near a localized site are kept, which bounds memory while
    leaving every ROI radius up to keep_radius_px exactly reproducible.
    """
    run = bundle.cfg.run
    min_sites = max(int(run.min_recall_fraction * bundle.n_ions), 1)
    out = []
    for stream, prep, exposure in (
            ("rate_bright", "bright", None),
            ("rate_dark", "dark", None),
            ("life_bright", "bright", run.lifetime_exposure_s),
            ("life_dark", "dark", run.lifetime_exposure_s)):
        n = run.n_rate_pairs if stream.startswith("rate") else run.n_lifetime_pairs
        rngs = stream_rngs(seed, stream, n)
        shots = []
        for shot in _cal_shots(bundle, rngs, prep, exposure, min_sites,
                               threads=threads):
            shots.append(CalShot(
                points=_reduce_points(shot.points, shot.sites_xy,
                                      keep_radius_px),
                sites_xy=shot.sites_xy))
        out.append(shots)
    return tuple(out)


def run_fidelity(bundle, calib, detection=None, n_pairs=None, seed=None,
                 radius_bins=5, threads=1):
    """Prepared bright/dark shot campaign -> FidelityReport."""
    cfg = bundle.cfg
    run = cfg.run
    det = detection or cfg.detection
    seed = run.seed if seed is None else seed
    n_pairs = run.n_pairs if n_pairs is None else n_pairs
    n_bright = n_pairs // 2
    n_dark = n_pairs - n_bright
    bright = ((r, d) for _, r, d in processed_pairs(
        bundle, stream_rngs(seed, "fid_bright", n_bright), "bright",
        det_exposure_s=det.total_time_s, threads=threads))
    dark = ((r, d) for _, r, d in processed_pairs(
        bundle, stream_rngs(seed, "fid_dark", n_dark), "dark",
        det_exposure_s=det.total_time_s, threads=threads))
    return measure_fidelity(
        bright, dark, calib, det,
        radius_edges=bundle.radius_edges(radius_bins),
        expected_n_ions=bundle.n_ions,
        min_recall_fraction=run.min_recall_fraction)


def _site_binned_counts(points, sites_xy, roi_list, bin_duration_s, n_bins):
    """Per-site time-binned ROI counts for several radii in one pass.

    Sites sit several ROI diameters apart, so the discs are disjoint and
    nearest-site assignment reproduces extract_roi_counts exactly.
    """
    n_sites = len(sites_xy)
    rmax = float(max(roi_list))
    tree = cKDTree(sites_xy)
    d, idx = tree.query(np.column_stack([points.x, points.y]), k=1,
                        distance_upper_bound=rmax)
    ok = np.isfinite(d)
    k = np.floor(points.t_ns[ok] / (bin_duration_s * 1e9)).astype(np.int64)
    keep = (k >= 0) & (k < n_bins)
    d, idx, k = d[ok][keep], idx[ok][keep], k[keep]
    out = {}
    for roi in roi_list:
        sel = d <= roi
        key = idx[sel] * n_bins + k[sel]
        out[roi] = np.bincount(key, minlength=n_sites * n_bins).reshape(
            n_sites, n_bins)
    return out


class _Tally:
    __slots__ = ("good", "total")

    def __init__(self):
        self.good = np.zeros(2, np.int64)
        self.total = np.zeros(2, np.int64)

    def add(self, prep_bright, correct):
        row = 0 if prep_bright else 1
        self.total[row] += 1
        self.good[row] += bool(correct)

    @property
    def f_bright(self):
        return self.good[0] / self.total[0] if self.total[0] else float("nan")

    @property
    def f_dark(self):
        return self.good[1] / self.total[1] if self.total[1] else float("nan")

    @property
    def f_avg(self):
        return 0.5 * (self.f_bright + self.f_dark)

    @property
    def n(self):
        return int(self.total.sum())


@dataclass
class SweepResult:
    times_ms: tuple
    roi_px: tuple
    nbins: tuple
    radius_edges: np.ndarray
    f_time: dict          # (time_ms, roi_px) -> _Tally
    f_bins: dict          # n_bins -> _Tally, fixed total time, default roi
    f_radius: dict        # (time_ms, radius_bin) -> _Tally, default roi
    n_pairs: int
    n_rejected: int
    config_sha: str = ""

    def rows(self):
        out = []
        for (t, roi), tally in sorted(self.f_time.items()):
            for metric, val in (("f_bright", tally.f_bright),
                                ("f_dark", tally.f_dark),
                                ("f_avg", tally.f_avg)):
                out.append({"axis": "time", "time_ms": t, "roi_px": roi,
                            "n_bins": "", "radius_lo": "", "radius_hi": "",
                            "metric": metric, "value": val, "n": tally.n})
        for nb, tally in sorted(self.f_bins.items()):
            for metric, val in (("f_bright", tally.f_bright),
                                ("f_dark", tally.f_dark),
                                ("f_avg", tally.f_avg)):
                out.append({"axis": "bins", "time_ms": max(self.times_ms),
                            "roi_px": "", "n_bins": nb, "radius_lo": "",
                            "radius_hi": "", "metric": metric, "value": val,
                            "n": tally.n})
        for (t, k), tally in sorted(self.f_radius.items()):
            out.append({"axis": "radius", "time_ms": t, "roi_px": "",
                        "n_bins": "", "radius_lo": round(self.radius_edges[k], 2),
                        "radius_hi": round(self.radius_edges[k + 1], 2),
                        "metric": "f_avg", "value": tally.f_avg, "n": tally.n})
        return out


def run_sweep(bundle, calibs, seed=None, n_pairs=None, threads=1):
    """Fidelity versus detection time, ROI radius, bin count and orbit radius.

    calibs: dict roi_radius_px -> CalibrationModel (see build_calibration's
    cal_shots reuse). All conditions are evaluated on the same simulated
    pairs: one long mixed-preparation detection shot per pair, truncated and
    rebinned per condition, exactly how a stored data set would be rescanned.
    """
    cfg = bundle.cfg
    run = cfg.run
    seed = run.seed if seed is None else seed
    n_pairs = run.sweep_pairs if n_pairs is None else n_pairs
    times_ms = tuple(float(t) for t in run.sweep_times_ms)
    rois = tuple(float(r) for r in run.sweep_roi_px)
    nbins = tuple(int(b) for b in run.sweep_nbins)
    base_roi = cfg.detection.roi_radius_px
    tb_ms = cfg.detection.bin_duration_s * 1e3
    total_ms = max(times_ms)
    n_fine = int(round(total_ms / tb_ms))
    radius_edges = bundle.radius_edges(run.sweep_radius_bins)

    params_time = {(t, roi): DetectionParams(tb_ms * 1e-3, int(round(t / tb_ms)), roi)
                   for t in times_ms for roi in rois}
    params_bins = {nb: DetectionParams(total_ms * 1e-3 / nb, nb, base_roi)
                   for nb in nbins}

    f_time = {key: _Tally() for key in params_time}
    f_bins = {nb: _Tally() for nb in nbins}
    f_radius = {(t, k): _Tally() for t in times_ms
                for k in range(run.sweep_radius_bins)}
    min_sites = max(int(run.min_recall_fraction * bundle.n_ions), 1)
    rejected = 0

    rngs = stream_rngs(seed, "sweep", n_pairs)
    for pair, ref_pts, det_pts in processed_pairs(
            bundle, rngs, "mixed", det_exposure_s=total_ms * 1e-3,
            threads=threads):
        sites = detect_ions(bin_image(ref_pts), max_sites=bundle.n_ions)
        if len(sites) < min_sites:
            rejected += 1
            continue
        xy = _sites_xy(sites)
        report = match_sites(xy, pair.det_truth.rest_sites_px,
                             match_radius_px=3.0)
        truth_bright = pair.det_truth.initial_bright
        radii = np.hypot(xy[:, 0], xy[:, 1])
        rbin = np.clip(np.searchsorted(radius_edges, radii, side="right") - 1,
                       0, run.sweep_radius_bins - 1)

        all_rois = rois if base_roi in rois else rois + (base_roi,)
        fine = _site_binned_counts(det_pts, xy, all_rois, tb_ms * 1e-3, n_fine)
        coarse = {nb: _site_binned_counts(det_pts, xy, (base_roi,),
                                          total_ms * 1e-3 / nb, nb)[base_roi]
                  for nb in nbins if n_fine % nb != 0}
        for si, ti in report.pairs:
            prep = bool(truth_bright[ti])
            r = radii[si]
            for (t, roi), params in params_time.items():
                counts = fine[roi][si, :params.n_bins]
                call = classify(counts, r, calibs[roi], params)
                correct = call.bright == prep
                f_time[(t, roi)].add(prep, correct)
                if roi == base_roi:
                    f_radius[(t, int(rbin[si]))].add(prep, correct)
            for nb, params in params_bins.items():
                if n_fine % nb == 0:
                    counts = fine[base_roi][si].reshape(nb, n_fine // nb).sum(axis=1)
                else:
                    counts = coarse[nb][si]
                call = classify(counts, r, calibs[base_roi], params)
                f_bins[nb].add(prep, call.bright == prep)

    return SweepResult(times_ms=times_ms, roi_px=rois, nbins=nbins,
                       radius_edges=radius_edges, f_time=f_time,
                       f_bins=f_bins, f_radius=f_radius, n_pairs=n_pairs,
                       n_rejected=rejected, config_sha=cfg.sha)


@dataclass
class RabiPoint:
    pulse_duration_s: float
    p_up: float
    n: int


def run_rabi(bundle, calib, seed=None, detection=None, threads=1):
    """Simulated global-flip scan: per-duration bright fraction + sinusoid fit.

    Each scan point prepares every ion bright with probability
    cos^2(pi f t), the ideal Rabi flopping curve, then counts bright calls
    through the standard detection sequence.
    """
    cfg = bundle.cfg
    run = cfg.run
    det = detection or cfg.detection
    seed = run.seed if seed is None else seed
    durations_s = [u * 1e-6 for u in run.rabi_durations_us]
    n_point = run.rabi_pairs_per_point
    rngs = stream_rngs(seed, "rabi", len(durations_s) * n_point)

    points = []
    for i, dur in enumerate(durations_s):
        p_up = 0.5 + 0.5 * math.cos(2 * math.pi * run.rabi_freq_hz * dur)
        n_up = 0
        n_tot = 0
        batch = rngs[i * n_point:(i + 1) * n_point]
        for pair, ref_pts, det_pts in processed_pairs(
                bundle, batch, p_up, det_exposure_s=det.total_time_s,
                threads=threads):
            try:
                result = run_detection_sequence(
                    ref_pts, det_pts, calib, det,
                    expected_n_ions=bundle.n_ions,
                    min_recall_fraction=run.min_recall_fraction)
            except ShotRejectionError:
                continue
            n_up += sum(c.bright for c in result.calls)
            n_tot += len(result.calls)
        points.append(RabiPoint(pulse_duration_s=dur,
                                p_up=n_up / n_tot if n_tot else float("nan"),
                                n=n_tot))
    fit = rabi_analysis([p.pulse_duration_s for p in points],
                        [p.p_up * p.n for p in points],
                        [p.n for p in points])
    return points, fit


def synthetic_event_stream(n_events, rate_hz=5.5e6, rng=None,
                           sensor=(256, 256)):
    """A realistic-density VIS stream for throughput benchmarking."""
    rng = rng or np.random.default_rng(0)
    n_uv = max(int(n_events / 1.36), 1)
    t_uv = np.sort(rng.uniform(0.0, n_events / rate_hz, n_uv)) * 1e9
    xy = rng.uniform(0.0, 255.0, (n_uv, 2))
    mult = 1 + rng.poisson(0.36, n_uv)
    src = np.repeat(np.arange(n_uv), mult)
    pos = xy[src] + rng.normal(0.0, 0.6, (len(src), 2))
    t = t_uv[src] + rng.exponential(10.0, len(src))
    tot = np.clip(25.0 + rng.gamma(1.6, 100.0, len(src)), 25.0, 600.0)
    order = np.argsort(t, kind="stable")
    ny, nx = sensor
    x = np.clip(np.rint(pos[:, 0]), 0, nx - 1).astype(np.uint16)
    y = np.clip(np.rint(pos[:, 1]), 0, ny - 1).astype(np.uint16)
    return RawEvents(x[order], y[order], quantize_ns(t[order]),
                     quantize_ns(tot[order]))


def run_bench(n_events=2_000_000, rate_hz=5.5e6, seed=0, timewalk=None,
              omega_r=2 * math.pi * 25e3):
    """Time the cluster + derotate stages on a synthetic stream.

    The JIT-compiled kernels are warmed up on a small slice first so the
    figure reflects steady-state throughput, and reported numbers cover
    UV reconstruction (clustering + aggregation) plus derotation.
    """
    rng = np.random.default_rng(seed)
    events = synthetic_event_stream(n_events, rate_hz, rng)
    frame = RotationFrame(omega_r=omega_r, c_tpx=1.0, t0_ns=0.0,
                          center_px=(128.0, 128.0))
    warm = events.take(np.arange(min(50_000, len(events))))
    derotate(reconstruct_uv(warm, timewalk), frame)

    t0 = time.perf_counter()
    uv = reconstruct_uv(events, timewalk)
    t1 = time.perf_counter()
    derotate(uv, frame)
    t2 = time.perf_counter()
    elapsed = t2 - t0
    return {"n_events": len(events), "n_uv": len(uv.x),
            "cluster_s": t1 - t0, "derotate_s": t2 - t1,
            "elapsed_s": elapsed,
            "events_per_s": len(events) / elapsed if elapsed > 0 else float("inf")}
