"""Per-ion spin-state discrimination from time-binned ROI photon counts.

Counts are collected in a circular region of interest around every
localized ion, split into n_bins bins of bin_duration_s. Classification
compares two composite hypotheses that each marginalize over a single state
flip at a bin boundary:

    bright:  L_B = sum_j w_j(tau_B) prod_{k<j} Pois(n_k; lam_B)
                                      prod_{k>=j} Pois(n_k; lam_D)
    dark:    L_D = sum_j w_j(tau_D) prod_{k<j} Pois(n_k; lam_D)
                                      prod_{k>=j} Pois(n_k; lam_B)

with flip priors w_j = exp(-j T/tau) - exp(-(j+1) T/tau) for j < N and
w_N = exp(-N T/tau) for no flip; the weights sum to one exactly. The call
is bright when ln L_B >= ln L_D (ties bright).

Rates (counts per bin versus orbit radius) come from first-bin counts of
prepared bright and dark calibration shots, lifetimes from exponential fits
of the ensemble bin-count decay per radius bin.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import curve_fit
from scipy.special import gammaln, logsumexp

from .errors import (ConvergenceError, IllConditionedFitError,
                     ShotRejectionError)
from .frame import bin_image
from .locate import detect_ions

_RATE_FLOOR = 1e-9  # counts per bin; keeps Poisson logs finite


@dataclass
class DetectionParams:
    """Detection window layout: n_bins bins of bin_duration_s each."""

    bin_duration_s: float = 1e-3
    n_bins: int = 10
    roi_radius_px: float = 4.0

    def __post_init__(self):
        if self.bin_duration_s <= 0 or self.n_bins < 1 or self.roi_radius_px <= 0:
            raise ValueError("invalid detection parameters")

    @property
    def total_time_s(self):
        return self.bin_duration_s * self.n_bins


def flip_prior_weights(n_bins, bin_duration_s, tau_s):
    """Prior probabilities for a flip at each bin boundary (j = n_bins: none).

    Sums to 1 exactly; tau_s = inf collapses onto the no-flip branch.
    """
    j = np.arange(n_bins + 1, dtype=np.float64)
    if not np.isfinite(tau_s):
        w = np.zeros(n_bins + 1)
        w[-1] = 1.0
        return w
    edges = np.exp(-j * bin_duration_s / tau_s)
    w = np.empty(n_bins + 1)
    w[:-1] = edges[:-1] - np.exp(-(j[:-1] + 1) * bin_duration_s / tau_s)
    w[-1] = edges[-1]
    return w


def extract_roi_counts(points, site_xy, params, t_start_ns=0.0):
    """Time-binned photon counts inside one circular ROI.

    A photon inside several overlapping ROIs counts for each of them; this
    function only sees one site so the caller keeps that property. Photons
    outside [t_start, t_start + total_time) are ignored.
    """
    sx, sy = float(site_xy[0]), float(site_xy[1])
    r2 = params.roi_radius_px ** 2
    inside = (points.x - sx) ** 2 + (points.y - sy) ** 2 <= r2
    t = points.t_ns[inside]
    k = np.floor((t - t_start_ns) / (params.bin_duration_s * 1e9)).astype(np.int64)
    k = k[(k >= 0) & (k < params.n_bins)]
    return np.bincount(k, minlength=params.n_bins)


@dataclass
class CalibrationModel:
    """Polynomial rate and lifetime models versus orbit radius (pixels).

    Rates are counts per bin at the stated roi_radius_px and bin_duration_s;
    classification rescales linearly when used with a different bin length
    but refuses a different ROI radius. Radii outside [r_min_px, r_max_px]
    are clamped and flagged on the resulting calls.
    """

    rate_bright_coeffs: tuple = None
    rate_dark_coeffs: tuple = None
    tau_bright_coeffs: tuple = None
    tau_dark_coeffs: tuple = None
    r_min_px: float = 0.0
    r_max_px: float = 0.0
    roi_radius_px: float = 4.0
    bin_duration_s: float = 1e-3
    meta: dict = field(default_factory=dict)

    def is_complete(self):
        return all(c is not None for c in (self.rate_bright_coeffs,
                                           self.rate_dark_coeffs,
                                           self.tau_bright_coeffs,
                                           self.tau_dark_coeffs))

    def _eval(self, coeffs, r):
        return float(npoly.polyval(r, np.asarray(coeffs, dtype=np.float64)))

    def rates_for(self, orbit_radius, params):
        """(lam_bright, lam_dark, tau_bright, tau_dark, clamped) at a radius."""
        if not self.is_complete():
            raise ValueError("calibration model is incomplete")
        if abs(params.roi_radius_px - self.roi_radius_px) > 1e-9:
            raise ValueError(
                f"calibrated for roi={self.roi_radius_px} px, "
                f"asked for {params.roi_radius_px} px")
        r = float(orbit_radius)
        clamped = r < self.r_min_px or r > self.r_max_px
        r = min(max(r, self.r_min_px), self.r_max_px)
        scale = params.bin_duration_s / self.bin_duration_s
        lam_b = max(self._eval(self.rate_bright_coeffs, r) * scale, _RATE_FLOOR)
        lam_d = max(self._eval(self.rate_dark_coeffs, r) * scale, _RATE_FLOOR)
        # a lifetime below one bin would let a single noisy polynomial fit
        # turn the flip prior into certainty of an instant flip
        tau_b = max(self._eval(self.tau_bright_coeffs, r), 1e-3)
        tau_d = max(self._eval(self.tau_dark_coeffs, r), 1e-3)
        return lam_b, lam_d, tau_b, tau_d, clamped

    def save(self, path):
        doc = {"format": "rotion calibration v1"}
        for key in ("rate_bright_coeffs", "rate_dark_coeffs",
                    "tau_bright_coeffs", "tau_dark_coeffs"):
            val = getattr(self, key)
            doc[key] = None if val is None else list(val)
        doc.update(r_min_px=self.r_min_px, r_max_px=self.r_max_px,
                   roi_radius_px=self.roi_radius_px,
                   bin_duration_s=self.bin_duration_s, meta=self.meta)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "rotion calibration v1":
            raise ValueError(f"not a calibration file: {path}")
        kwargs = {k: (tuple(doc[k]) if doc[k] is not None else None)
                  for k in ("rate_bright_coeffs", "rate_dark_coeffs",
                            "tau_bright_coeffs", "tau_dark_coeffs")}
        return cls(r_min_px=doc["r_min_px"], r_max_px=doc["r_max_px"],
                   roi_radius_px=doc["roi_radius_px"],
                   bin_duration_s=doc["bin_duration_s"], meta=doc.get("meta", {}),
                   **kwargs)


@dataclass
class StateCall:
    """Classification outcome for one ion in one detection shot."""

    bright: bool
    log_odds: float
    log_l_bright: float
    log_l_dark: float
    orbit_radius: float
    radius_clamped: bool
    counts: np.ndarray


def _log_poisson(n, lam):
    return n * math.log(lam) - lam - gammaln(n + 1.0)


def classify(counts, orbit_radius, calib, params):
    """Maximum-likelihood state call for one time-binned count trace."""
    n = np.asarray(counts, dtype=np.float64)
    if len(n) != params.n_bins:
        raise ValueError(f"expected {params.n_bins} bins, got {len(n)}")
    if np.any(n < 0):
        raise ValueError("negative counts")
    lam_b, lam_d, tau_b, tau_d, clamped = calib.rates_for(orbit_radius, params)

    lp_b = _log_poisson(n, lam_b)
    lp_d = _log_poisson(n, lam_d)
    # cum[j] = sum of the first j bins under each rate
    cum_b = np.concatenate([[0.0], np.cumsum(lp_b)])
    cum_d = np.concatenate([[0.0], np.cumsum(lp_d)])
    with np.errstate(divide="ignore"):
        lw_b = np.log(flip_prior_weights(params.n_bins, params.bin_duration_s,
                                         tau_b))
        lw_d = np.log(flip_prior_weights(params.n_bins, params.bin_duration_s,
                                         tau_d))
    branches_bright = lw_b + cum_b + (cum_d[-1] - cum_d)
    branches_dark = lw_d + cum_d + (cum_b[-1] - cum_b)
    log_l_b = float(logsumexp(branches_bright))
    log_l_d = float(logsumexp(branches_dark))
    return StateCall(bright=log_l_b >= log_l_d, log_odds=log_l_b - log_l_d,
                     log_l_bright=log_l_b, log_l_dark=log_l_d,
                     orbit_radius=float(orbit_radius), radius_clamped=clamped,
                     counts=np.asarray(counts).copy())


@dataclass
class CalShot:
    """One calibration sample: localized sites plus a prepared-state shot."""

    points: object                # RestPoints of the prepared detection shot
    sites_xy: np.ndarray          # (n, 2) rest-frame site positions


def _first_bin_samples(shots, params):
    radii, counts = [], []
    for shot in shots:
        for xy in np.asarray(shot.sites_xy).reshape(-1, 2):
            c = extract_roi_counts(shot.points, xy, params)
            radii.append(math.hypot(xy[0], xy[1]))
            counts.append(c[0])
    return np.asarray(radii), np.asarray(counts, dtype=np.float64)


def _guarded_polyfit(x, y, degree, what):
    if len(np.unique(np.round(x, 6))) <= degree:
        raise IllConditionedFitError(
            f"{what}: need more than {degree} distinct radii, "
            f"got {len(np.unique(x))}")
    return tuple(npoly.polyfit(x, y, degree))


def calibrate_rates(bright_shots, dark_shots, params, degree=3):
    """Fit counts-per-bin polynomials from prepared bright and dark shots.

    Uses the first time bin of every ion ROI so lifetime decay barely
    biases the estimate. Returns a CalibrationModel without lifetimes.
    """
    rb, cb = _first_bin_samples(bright_shots, params)
    rd, cd = _first_bin_samples(dark_shots, params)
    if len(rb) == 0 or len(rd) == 0:
        raise IllConditionedFitError("no calibration samples")
    coeffs_b = _guarded_polyfit(rb, cb, degree, "bright rate fit")
    coeffs_d = _guarded_polyfit(rd, cd, degree, "dark rate fit")
    r_min = float(min(rb.min(), rd.min()))
    r_max = float(max(rb.max(), rd.max()))
    grid = np.linspace(r_min, r_max, 64)
    fb = npoly.polyval(grid, np.asarray(coeffs_b))
    fd = np.maximum(npoly.polyval(grid, np.asarray(coeffs_d)), 0.0)
    if np.any(fb <= fd):
        raise IllConditionedFitError(
            "bright rate does not dominate dark rate across calibrated range")
    return CalibrationModel(
        rate_bright_coeffs=coeffs_b, rate_dark_coeffs=coeffs_d,
        r_min_px=r_min, r_max_px=r_max, roi_radius_px=params.roi_radius_px,
        bin_duration_s=params.bin_duration_s,
        meta={"n_bright_samples": len(rb), "n_dark_samples": len(rd),
              "rate_degree": degree})


def _bin_count_matrix(shots, params):
    rows, radii = [], []
    for shot in shots:
        for xy in np.asarray(shot.sites_xy).reshape(-1, 2):
            rows.append(extract_roi_counts(shot.points, xy, params))
            radii.append(math.hypot(xy[0], xy[1]))
    return np.asarray(radii), np.asarray(rows, dtype=np.float64)


def _fit_decay(t, c, bright, tau_bounds=(1e-4, 10.0)):
    if bright:
        model = lambda tt, a, tau, off: a * np.exp(-tt / tau) + off
        a0 = max(c[0] - c[-1], 1e-3)
    else:
        model = lambda tt, a, tau, off: a * (1.0 - np.exp(-tt / tau)) + off
        a0 = max(c[-1] - c[0], 1e-3)
    p0 = [a0, max(t[-1] / 2.0, tau_bounds[0] * 2), max(c.min(), 0.0)]
    popt, pcov = curve_fit(model, t, c, p0=p0,
                           bounds=([0.0, tau_bounds[0], 0.0],
                                   [np.inf, tau_bounds[1], np.inf]),
                           maxfev=2000)
    at_bound = (popt[1] >= tau_bounds[1] * 0.999 or
                popt[1] <= tau_bounds[0] * 1.001)
    return popt, at_bound


def calibrate_lifetimes(bright_shots, dark_shots, params, n_radius_bins=5,
                        degree=2, base=None, tau_bounds=(1e-4, 10.0)):
    """Fit state lifetimes versus radius from calibration shot ensembles.

    Bright shots decay as A exp(-t/tau_B) + C as the dark state populates;
    dark shots grow as B (1 - exp(-t/tau_D)) + D through repumping. Radius
    bins follow sample quantiles so each holds a comparable number of ions;
    every bin is fit independently (no shared parameters), then tau versus
    radius gets a low-order polynomial. Fits pinned at a tau bound carry no
    lifetime information and stay out of the polynomial; when the polynomial
    still turns nonpositive anywhere in the calibrated radius range it is
    replaced by the median per-bin tau (flagged in meta). Returns a copy of
    base (or a fresh model) with the lifetime fields filled in; unusable
    radius bins are recorded under meta["lifetime_skipped_bins"].
    """
    r_b, m_b = _bin_count_matrix(bright_shots, params)
    r_d, m_d = _bin_count_matrix(dark_shots, params)
    if len(r_b) == 0 or len(r_d) == 0:
        raise IllConditionedFitError("no lifetime calibration samples")
    r_hi = max(r_b.max(), r_d.max()) * (1 + 1e-9)
    t = (np.arange(params.n_bins) + 0.5) * params.bin_duration_s

    taus = {"bright": [], "dark": []}
    centers = {"bright": [], "dark": []}
    skipped, at_bound_flags = [], []
    for name, radii, mat, is_bright in (("bright", r_b, m_b, True),
                                        ("dark", r_d, m_d, False)):
        edges = np.quantile(radii, np.linspace(0.0, 1.0, n_radius_bins + 1))
        edges[0], edges[-1] = 0.0, r_hi
        for k in range(n_radius_bins):
            sel = (radii >= edges[k]) & (radii < edges[k + 1])
            if sel.sum() < 3:
                skipped.append(f"{name}:{k}:too_few_ions")
                continue
            c = mat[sel].mean(axis=0)
            try:
                popt, at_bound = _fit_decay(t, c, is_bright, tau_bounds)
            except RuntimeError:
                skipped.append(f"{name}:{k}:no_convergence")
                continue
            if at_bound:
                at_bound_flags.append(f"{name}:{k}")
                continue
            taus[name].append(popt[1])
            centers[name].append(float(np.median(radii[sel])))

    out = base if base is not None else CalibrationModel(
        roi_radius_px=params.roi_radius_px, bin_duration_s=params.bin_duration_s)
    r_lo_eval = out.r_min_px if out.r_min_px else min(r_b.min(), r_d.min())
    r_hi_eval = max(out.r_max_px, float(r_hi))
    grid = np.linspace(r_lo_eval, r_hi_eval, 128)
    coeffs, flattened = {}, []
    for name in ("bright", "dark"):
        tau = np.asarray(taus[name])
        ctr = np.asarray(centers[name])
        if len(tau) == 0:
            raise IllConditionedFitError(f"no usable {name} lifetime bins")
        deg = min(degree, len(tau) - 1)
        c = tuple(npoly.polyfit(ctr, tau, deg))
        if np.any(npoly.polyval(grid, np.asarray(c)) <= 0):
            c = (float(np.median(tau)),)
            flattened.append(name)
        coeffs[name] = c
    meta = dict(out.meta)
    meta.update(lifetime_skipped_bins=skipped, lifetime_tau_at_bound=at_bound_flags,
                lifetime_poly_flattened=flattened,
                lifetime_degree=degree, lifetime_radius_bins=n_radius_bins)
    return CalibrationModel(
        rate_bright_coeffs=out.rate_bright_coeffs,
        rate_dark_coeffs=out.rate_dark_coeffs,
        tau_bright_coeffs=coeffs["bright"], tau_dark_coeffs=coeffs["dark"],
        r_min_px=out.r_min_px, r_max_px=max(out.r_max_px, float(r_hi)),
        roi_radius_px=params.roi_radius_px, bin_duration_s=out.bin_duration_s,
        meta=meta)


@dataclass
class DetectionResult:
    sites: list
    calls: list
    n_dropped_ref: int = 0


def run_detection_sequence(ref_points, det_points, calib, params,
                           expected_n_ions=None, min_recall_fraction=0.5,
                           image_shape=(256, 256), detect_kwargs=None,
                           det_t_start_ns=0.0):
    """Localize ions on the reference image and classify the detection shot.

    The reference points and detection points must already be derotated to
    the same crystal orientation (each with its own t0). Raises
    ShotRejectionError when localization finds implausibly few sites, which
    catches scrambled or badly derotated reference shots. A known ion count
    also caps localization at the expected_n_ions brightest sites so stray
    background clumps do not pick up state calls.
    """
    image = bin_image(ref_points, shape=image_shape)
    kwargs = dict(detect_kwargs or {})
    if expected_n_ions is not None:
        kwargs.setdefault("max_sites", expected_n_ions)
    sites = detect_ions(image, **kwargs)
    if expected_n_ions is not None and \
            len(sites) < min_recall_fraction * expected_n_ions:
        raise ShotRejectionError(
            f"reference localization found {len(sites)} of "
            f"{expected_n_ions} expected ions")
    if not sites:
        raise ShotRejectionError("reference localization found no ions")
    calls = []
    for s in sites:
        counts = extract_roi_counts(det_points, (s.x, s.y), params,
                                    t_start_ns=det_t_start_ns)
        calls.append(classify(counts, s.orbit_radius, calib, params))
    return DetectionResult(sites=sites, calls=calls,
                           n_dropped_ref=image.n_dropped)


@dataclass
class FidelityReport:
    f_bright: float
    f_dark: float
    f_mean: float
    err_bright: float
    err_dark: float
    n_bright: int
    n_dark: int
    radius_edges: np.ndarray
    per_radius_f_bright: np.ndarray
    per_radius_f_dark: np.ndarray
    per_radius_n: np.ndarray
    n_rejected: int = 0

    @property
    def per_radius_f_mean(self):
        return 0.5 * (self.per_radius_f_bright + self.per_radius_f_dark)


def _binomial_err(k, n):
    if n == 0:
        return float("nan")
    p = k / n
    return math.sqrt(max(p * (1 - p), 1.0 / n) / n)


def measure_fidelity(bright_pairs, dark_pairs, calib, params,
                     radius_edges=None, **sequence_kwargs):
    """Average detection fidelity over prepared bright and dark shot pairs.

    bright_pairs / dark_pairs: iterables of (ref_points, det_points) with
    every ion of the detection shot prepared in the named state. Fidelity
    per preparation is the fraction of correct calls; shots rejected by the
    sequence quality checks are counted but excluded from the rates.
    """
    if radius_edges is None:
        radius_edges = np.linspace(0.0, 110.0, 6)
    radius_edges = np.asarray(radius_edges, dtype=np.float64)
    nb = len(radius_edges) - 1
    good = np.zeros((2, nb), np.int64)
    total = np.zeros((2, nb), np.int64)
    overall_good = np.zeros(2, np.int64)
    overall_total = np.zeros(2, np.int64)
    rejected = 0
    for prep_bright, pairs in ((True, bright_pairs), (False, dark_pairs)):
        row = 0 if prep_bright else 1
        for ref_points, det_points in pairs:
            try:
                result = run_detection_sequence(ref_points, det_points, calib,
                                                params, **sequence_kwargs)
            except ShotRejectionError:
                rejected += 1
                continue
            for call in result.calls:
                k = int(np.clip(np.searchsorted(radius_edges, call.orbit_radius,
                                                side="right") - 1, 0, nb - 1))
                total[row, k] += 1
                overall_total[row] += 1
                if call.bright == prep_bright:
                    good[row, k] += 1
                    overall_good[row] += 1
    with np.errstate(invalid="ignore"):
        per_b = good[0] / np.maximum(total[0], 1)
        per_d = good[1] / np.maximum(total[1], 1)
    f_b = overall_good[0] / overall_total[0] if overall_total[0] else float("nan")
    f_d = overall_good[1] / overall_total[1] if overall_total[1] else float("nan")
    return FidelityReport(
        f_bright=f_b, f_dark=f_d, f_mean=0.5 * (f_b + f_d),
        err_bright=_binomial_err(overall_good[0], overall_total[0]),
        err_dark=_binomial_err(overall_good[1], overall_total[1]),
        n_bright=int(overall_total[0]), n_dark=int(overall_total[1]),
        radius_edges=radius_edges, per_radius_f_bright=per_b,
        per_radius_f_dark=per_d, per_radius_n=total.sum(axis=0),
        n_rejected=rejected)


@dataclass
class RabiFit:
    freq_hz: float
    freq_err_hz: float
    amplitude: float
    amplitude_err: float
    offset: float
    offset_err: float
    phase_rad: float
    contrast: float
    rms_residual: float
    n_points: int


def rabi_analysis(durations_s, n_up, n_total):
    """Fit P_up(t) = offset + amplitude * cos(2 pi f t + phase).

    A coarse frequency grid with linear amplitude solves seeds a nonlinear
    least-squares refinement weighted by binomial errors. Requires at least
    6 distinct durations spanning at least one fitted period.
    """
    t = np.asarray(durations_s, dtype=np.float64)
    n_up = np.asarray(n_up, dtype=np.float64)
    n_tot = np.asarray(n_total, dtype=np.float64)
    if len(t) != len(n_up) or len(t) != len(n_tot) or np.any(n_tot <= 0):
        raise ValueError("inconsistent scan arrays")
    if len(np.unique(t)) < 6:
        raise ValueError("need at least 6 distinct pulse durations")
    p = n_up / n_tot
    sig = np.sqrt(np.maximum(p * (1 - p), 0.25 / n_tot) / n_tot)

    span = t.max() - t.min()
    gaps = np.diff(np.sort(np.unique(t)))
    f_hi = 0.5 / max(gaps.min(), 1e-12)
    f_lo = 0.25 / max(span, 1e-12)
    grid = np.linspace(f_lo, f_hi, 400)
    best = None
    for f in grid:
        c, s = np.cos(2 * np.pi * f * t), np.sin(2 * np.pi * f * t)
        design = np.column_stack([np.ones_like(t), c, s]) / sig[:, None]
        coef, *_ = np.linalg.lstsq(design, p / sig, rcond=None)
        res = design @ coef - p / sig
        sse = float(res @ res)
        if best is None or sse < best[0]:
            best = (sse, f, coef)
    _, f0, (c0, a_cos, a_sin) = best
    amp0 = math.hypot(a_cos, a_sin)
    ph0 = math.atan2(-a_sin, a_cos)

    def model(tt, off, amp, freq, phase):
        return off + amp * np.cos(2 * np.pi * freq * tt + phase)

    try:
        popt, pcov = curve_fit(model, t, p, sigma=sig, absolute_sigma=True,
                               p0=[c0, amp0, f0, ph0], maxfev=5000)
    except RuntimeError as exc:
        raise ConvergenceError(f"sinusoid fit failed: {exc}; "
                               f"seed=({c0:.3f},{amp0:.3f},{f0:.1f},{ph0:.3f})")
    off, amp, freq, phase = popt
    if amp < 0:
        amp, phase = -amp, phase + math.pi
    if freq < 0:
        freq, phase = -freq, -phase
    phase = (phase + math.pi) % (2 * math.pi) - math.pi
    errs = np.sqrt(np.clip(np.diag(pcov), 0.0, None))
    if span * freq < 1.0:
        raise ConvergenceError(
            f"scan spans {span * freq:.2f} fitted periods, need >= 1 "
            f"(fit: off={off:.3f} amp={amp:.3f} f={freq:.1f} Hz)")
    resid = model(t, *popt) - p
    return RabiFit(freq_hz=float(freq), freq_err_hz=float(errs[2]),
                   amplitude=float(amp), amplitude_err=float(errs[1]),
                   offset=float(off), offset_err=float(errs[0]),
                   phase_rad=float(phase), contrast=float(2 * amp),
                   rms_residual=float(np.sqrt(np.mean(resid ** 2))),
                   n_points=len(t))
