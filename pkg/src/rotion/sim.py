"""Synthetic rotating-crystal photon streams with exact ground truth.

The simulator works in three stages. A planar Coulomb crystal is solved
from the confinement energy

    E = sum_i 0.5 k (x_i^2 + y_i^2) + 0.5 k delta (y_i^2 - x_i^2)
        + sum_{i<j} 1 / |r_i - r_j|

(dimensionless charges; a positive rotating-wall delta softens x so the
crystal boundary stretches along x). Each detection shot then draws UV
photons per ion from radius-dependent bright/dark scattering rates with at
most one exponential state flip per ion, rotates the emission positions into
the lab frame at the emission-time crystal phase and adds uniform plus
beam-stripe background light. Finally the image-intensifier stage splits
every UV photon into 1 + Poisson distributed VIS events with spatial spread,
tot-dependent time walk, onset delay and timestamp jitter, quantized onto
the detector tick grid.

Camera clock skew is modelled by dividing true times by c_tpx before
quantization, so the sync-edge fit recovers c_tpx and derotation with the
corrected frequency is exact.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.optimize import minimize

from .errors import ConvergenceError
from .events import RawEvents, SyncEdges, quantize_ns, TICK_NS
from .frame import RotationFrame

SENSOR_SHAPE = (256, 256)


@dataclass
class TrapParams:
    """Confinement and geometry of the rotating crystal."""

    n_ions: int = 120
    rotation_freq_hz: float = 25e3
    wall_delta: float = 0.05
    radial_stiffness: float = 1.0
    spacing_um: float = 35.0
    pixel_scale_um: float = 2.4


@dataclass
class CrystalState:
    """Solved equilibrium positions, scaled to physical units."""

    positions_um: np.ndarray
    pixel_scale_um: float
    params: TrapParams = None

    @property
    def n_ions(self):
        return len(self.positions_um)

    @property
    def positions_px(self):
        return self.positions_um / self.pixel_scale_um

    @property
    def radii_px(self):
        p = self.positions_px
        return np.hypot(p[:, 0], p[:, 1])

    @property
    def mean_nn_spacing_um(self):
        return float(np.mean(_nn_distances(self.positions_um)))

    @property
    def diameter_um(self):
        p = self.positions_um
        return 2.0 * float(np.hypot(p[:, 0], p[:, 1]).max())


def _nn_distances(pos):
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def _energy_grad(flat, k, delta):
    pos = flat.reshape(-1, 2)
    wx = k * (1.0 - delta)
    wy = k * (1.0 + delta)
    e_conf = 0.5 * (wx * pos[:, 0] ** 2 + wy * pos[:, 1] ** 2).sum()
    g = np.empty_like(pos)
    g[:, 0] = wx * pos[:, 0]
    g[:, 1] = wy * pos[:, 1]
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = (diff ** 2).sum(-1)
    np.fill_diagonal(r2, np.inf)
    inv_r = 1.0 / np.sqrt(r2)
    e_pair = 0.5 * inv_r.sum()
    g -= (diff * (inv_r ** 3)[:, :, None]).sum(axis=1)
    return e_conf + e_pair, g.ravel()


def _hessian(flat, k, delta):
    pos = flat.reshape(-1, 2)
    n = len(pos)
    h = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    h[2 * idx, 2 * idx] = k * (1.0 - delta)
    h[2 * idx + 1, 2 * idx + 1] = k * (1.0 + delta)
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = (diff ** 2).sum(-1)
    np.fill_diagonal(r2, np.inf)
    inv_r3 = r2 ** -1.5
    # pair block: (3 rr^T - I) / r^3
    outer = diff[:, :, :, None] * diff[:, :, None, :]
    block = 3.0 * outer / r2[:, :, None, None] - np.eye(2)
    block *= inv_r3[:, :, None, None]
    for a in range(2):
        for b in range(2):
            hb = block[:, :, a, b]
            h[np.ix_(2 * idx + a, 2 * idx + b)] += np.diag(hb.sum(axis=1)) - hb
    return h


def _hex_seed(n, scale, rng):
    if n == 1:
        return np.zeros((1, 2))
    m = int(np.ceil(np.sqrt(n))) + 3
    i, j = np.mgrid[-m:m + 1, -m:m + 1]
    pts = np.stack([i + 0.5 * j, (math.sqrt(3) / 2) * j], -1).reshape(-1, 2)
    pts = pts.astype(np.float64)
    order = np.argsort(np.hypot(pts[:, 0], pts[:, 1]), kind="stable")
    pts = pts[order[:n]]
    rmax = np.hypot(pts[:, 0], pts[:, 1]).max()
    pts *= scale / max(rmax, 1e-9)
    pts += rng.normal(0.0, 0.02 * scale / max(np.sqrt(n), 1.0), pts.shape)
    return pts


def solve_equilibrium(params, seed=0):
    """Minimise the crystal energy to a force-balanced configuration.

    Quasi-Newton descent from a perturbed hexagonal seed, then damped Newton
    polish until the gradient max-norm is far below the 1e-8 acceptance
    bound. Positions are rescaled so the mean nearest-neighbour spacing
    matches params.spacing_um. Deterministic for a given seed.
    """
    n = params.n_ions
    if n < 1:
        raise ValueError("n_ions must be >= 1")
    k = params.radial_stiffness
    if k <= 0:
        raise ValueError("radial_stiffness must be positive")
    if not (0 <= params.wall_delta < 1):
        raise ValueError("wall_delta must lie in [0, 1)")
    if n == 1:
        return CrystalState(np.zeros((1, 2)), params.pixel_scale_um, params)

    seeds = np.random.SeedSequence(seed).spawn(6)
    r_est = (0.8 * n / k) ** (1.0 / 3.0)
    last_gm = np.inf
    for attempt in range(6):
        rng = np.random.default_rng(seeds[attempt])
        p0 = _hex_seed(n, r_est, rng).ravel()
        res = minimize(_energy_grad, p0, args=(k, params.wall_delta),
                       jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": 1e-10, "ftol": 0.0})
        p = res.x
        # Newton polish with Levenberg damping
        lam = 0.0
        for _ in range(80):
            _, g = _energy_grad(p, k, params.wall_delta)
            gm = np.abs(g).max()
            if gm < 1e-11:
                break
            h = _hessian(p, k, params.wall_delta)
            stepped = False
            for _ in range(12):
                try:
                    step = np.linalg.solve(
                        h + lam * np.eye(len(p)), -g)
                except np.linalg.LinAlgError:
                    lam = max(lam * 10, 1e-10)
                    continue
                cand = p + step
                _, gc = _energy_grad(cand, k, params.wall_delta)
                if np.abs(gc).max() < gm:
                    p = cand
                    lam = lam / 10 if lam > 1e-14 else 0.0
                    stepped = True
                    break
                lam = max(lam * 10, 1e-10)
            if not stepped:
                break
        _, g = _energy_grad(p, k, params.wall_delta)
        last_gm = np.abs(g).max()
        if last_gm < 1e-8:
            pos = p.reshape(-1, 2)
            mean_nn = np.mean(_nn_distances(pos))
            pos = pos * (params.spacing_um / mean_nn)
            return CrystalState(pos, params.pixel_scale_um, params)
    raise ConvergenceError(
        f"equilibrium gradient stalled at max-norm {last_gm:.3e}")


def _poly_eval(coeffs, r):
    return npoly.polyval(np.asarray(r, dtype=np.float64), coeffs)


@dataclass
class IlluminationModel:
    """Radius-dependent scattering rates, lifetimes and stray light.

    Radii are in detector pixels from the rotation center. Polynomials use
    ascending coefficient order; evaluation clamps radii to [0, r_max_px]
    and rates to >= 0.
    """

    rate_bright_coeffs: tuple = (40e3,)
    rate_dark_coeffs: tuple = (800.0,)
    tau_bright_coeffs: tuple = (0.2,)
    tau_dark_coeffs: tuple = (0.012,)
    background_rate_px_s: float = 15.0
    stripe_rate_px_s: float = 0.0   # peak of the lab-frame beam stripe
    stripe_sigma_px: float = 19.0
    r_max_px: float = 110.0

    def _clamp_r(self, r):
        return np.clip(np.asarray(r, dtype=np.float64), 0.0, self.r_max_px)

    def rate_bright(self, r):
        return np.maximum(_poly_eval(self.rate_bright_coeffs, self._clamp_r(r)), 0.0)

    def rate_dark(self, r):
        return np.maximum(_poly_eval(self.rate_dark_coeffs, self._clamp_r(r)), 0.0)

    def tau_bright(self, r):
        return np.maximum(_poly_eval(self.tau_bright_coeffs, self._clamp_r(r)), 1e-6)

    def tau_dark(self, r):
        return np.maximum(_poly_eval(self.tau_dark_coeffs, self._clamp_r(r)), 1e-6)

    @classmethod
    def paper_like(cls, edge_radius_px=100.0, rate_center=40e3, rate_edge=10e3,
                   dark_fraction_of_bright=0.02, tau_bright_s=0.2,
                   tau_dark_center_s=0.012, tau_dark_edge_s=0.008,
                   background_rate_px_s=15.0, stripe_rate_px_s=0.0):
        r2 = edge_radius_px ** 2
        rb = (rate_center, 0.0, (rate_edge - rate_center) / r2)
        rd = tuple(c * dark_fraction_of_bright for c in rb)
        td = (tau_dark_center_s, 0.0, (tau_dark_edge_s - tau_dark_center_s) / r2)
        return cls(rate_bright_coeffs=rb, rate_dark_coeffs=rd,
                   tau_bright_coeffs=(tau_bright_s,), tau_dark_coeffs=td,
                   background_rate_px_s=background_rate_px_s,
                   stripe_rate_px_s=stripe_rate_px_s,
                   r_max_px=edge_radius_px * 1.1)


@dataclass
class IntensifierModel:
    """Image intensifier, phosphor and detector response."""

    multiplicity_mean: float = 1.36
    spatial_spread_px: float = 0.6
    optical_blur_px: float = 2.4
    phosphor_halflife_ns: float = 70.0
    onset_fraction: float = 0.1      # leading-edge share of the phosphor decay
    tot_shape: float = 1.6
    tot_scale_ns: float = 100.0
    tot_min_ns: float = 25.0
    tot_max_ns: float = 600.0
    timewalk_a_ns2: float = 2000.0
    timewalk_b_ns: float = 25.0
    timewalk_jitter_ns: float = 5.0

    @property
    def onset_scale_ns(self):
        return self.phosphor_halflife_ns * self.onset_fraction / math.log(2.0)

    def timewalk_shift(self, tot_ns):
        return self.timewalk_a_ns2 / (np.asarray(tot_ns) + self.timewalk_b_ns)


@dataclass
class ShotTruth:
    """Ground truth for one simulated shot."""

    rest_sites_px: np.ndarray     # (n_ions, 2), rotation center at origin
    initial_bright: np.ndarray    # bool per ion
    flip_time_s: np.ndarray       # inf when the ion never flips in the shot
    photon_source: np.ndarray     # ion index, -1 for background
    photon_t_emit_s: np.ndarray   # experiment clock
    photon_t_cam_ns: np.ndarray   # ideal camera arrival (pre walk/jitter)
    photon_lab_px: np.ndarray     # (m, 2) splat centers after optical blur
    frame: RotationFrame
    exposure_s: float

    @property
    def n_photons(self):
        return len(self.photon_source)


def expected_ion_photons(rate1, rate2, tau1, exposure_s):
    """Mean photon number for an ion starting at rate1 that may flip once."""
    t = exposure_s
    seen1 = tau1 * (1.0 - math.exp(-t / tau1))
    return rate1 * seen1 + rate2 * (t - seen1)


def _emit_times(rng, rate1, rate2, tau1, exposure_s):
    """Emission times for one ion with at most one state flip.

    Returns (times, flip_time) with flip_time = inf when no flip occurred
    within the exposure.
    """
    flip = rng.exponential(tau1)
    t1 = min(flip, exposure_s)
    n1 = rng.poisson(rate1 * t1)
    times = [rng.uniform(0.0, t1, n1)] if n1 else []
    if flip < exposure_s:
        n2 = rng.poisson(rate2 * (exposure_s - flip))
        if n2:
            times.append(rng.uniform(flip, exposure_s, n2))
    else:
        flip = np.inf
    out = np.concatenate(times) if times else np.zeros(0)
    return out, flip


def simulate_shot(crystal, illum, intens, frame, initial_bright, exposure_s,
                  rng, sync_jitter_ns=2.0, sensor_shape=SENSOR_SHAPE):
    """Synthesize one detection shot.

    Arguments:
        crystal: CrystalState.
        illum: IlluminationModel.
        intens: IntensifierModel.
        frame: RotationFrame ground truth (center, t0, c_tpx, omega).
        initial_bright: bool array, prepared state per ion.
        exposure_s: shot length in experiment-clock seconds.
        rng: numpy Generator; identical generators give identical streams.

    Returns:
        (RawEvents, SyncEdges, ShotTruth)
    """
    if exposure_s <= 0:
        raise ValueError("exposure must be positive")
    rest = crystal.positions_px
    n_ions = len(rest)
    initial_bright = np.asarray(initial_bright, dtype=bool)
    if len(initial_bright) != n_ions:
        raise ValueError("initial_bright length does not match crystal")
    radii = np.hypot(rest[:, 0], rest[:, 1])
    rb = illum.rate_bright(radii)
    rd = illum.rate_dark(radii)
    tb = illum.tau_bright(radii)
    td = illum.tau_dark(radii)

    src, temit = [], []
    flips = np.full(n_ions, np.inf)
    for i in range(n_ions):
        if initial_bright[i]:
            t, flips[i] = _emit_times(rng, rb[i], rd[i], tb[i], exposure_s)
        else:
            t, flips[i] = _emit_times(rng, rd[i], rb[i], td[i], exposure_s)
        if len(t):
            src.append(np.full(len(t), i, np.int32))
            temit.append(t)

    ny, nx = sensor_shape
    n_px = nx * ny
    n_bg_uniform = rng.poisson(illum.background_rate_px_s * n_px * exposure_s)
    stripe_total = (illum.stripe_rate_px_s * math.sqrt(2 * math.pi)
                    * illum.stripe_sigma_px * nx)
    n_bg_stripe = rng.poisson(stripe_total * exposure_s) if stripe_total > 0 else 0
    n_bg = int(n_bg_uniform) + int(n_bg_stripe)
    if n_bg:
        src.append(np.full(n_bg, -1, np.int32))
        temit.append(rng.uniform(0.0, exposure_s, n_bg))

    source = np.concatenate(src) if src else np.zeros(0, np.int32)
    t_emit = np.concatenate(temit) if temit else np.zeros(0)
    order = np.argsort(t_emit, kind="stable")
    source, t_emit = source[order], t_emit[order]
    m = len(source)

    # lab-frame splat centers at the emission-time crystal phase
    cx, cy = frame.center_px
    t0_exp_s = frame.t0_ns * frame.c_tpx * 1e-9
    lab = np.empty((m, 2))
    ion_mask = source >= 0
    phi = frame.omega_r * (t_emit[ion_mask] - t0_exp_s)
    cphi, sphi = np.cos(phi), np.sin(phi)
    rx = rest[source[ion_mask], 0]
    ry = rest[source[ion_mask], 1]
    lab[ion_mask, 0] = cx + cphi * rx + sphi * ry
    lab[ion_mask, 1] = cy - sphi * rx + cphi * ry
    lab[ion_mask] += rng.normal(0.0, intens.optical_blur_px,
                                (int(ion_mask.sum()), 2))
    bg_mask = ~ion_mask
    n_bg_total = int(bg_mask.sum())
    if n_bg_total:
        # uniform sensor glow plus the horizontal beam stripe
        p_stripe = 0.0 if n_bg == 0 else (n_bg_stripe / n_bg)
        in_stripe = rng.random(n_bg_total) < p_stripe
        bx = rng.uniform(-0.5, nx - 0.5, n_bg_total)
        by = np.where(in_stripe,
                      rng.normal(cy, illum.stripe_sigma_px, n_bg_total),
                      rng.uniform(-0.5, ny - 0.5, n_bg_total))
        lab[bg_mask, 0] = bx
        lab[bg_mask, 1] = by

    t_cam_ns = t_emit * 1e9 / frame.c_tpx

    # intensifier stage: VIS multiplicity, spread, tot, walk, jitter
    mult = 1 + rng.poisson(max(intens.multiplicity_mean - 1.0, 0.0), m)
    vis_src = np.repeat(np.arange(m), mult)
    n_vis = len(vis_src)
    pos = lab[vis_src] + rng.normal(0.0, intens.spatial_spread_px, (n_vis, 2))
    tot = intens.tot_min_ns + rng.gamma(intens.tot_shape, intens.tot_scale_ns,
                                        n_vis)
    tot = np.clip(tot, intens.tot_min_ns, intens.tot_max_ns)
    tot = np.maximum(quantize_ns(tot), TICK_NS)
    t_vis = (t_cam_ns[vis_src]
             + rng.exponential(intens.onset_scale_ns, n_vis)
             + intens.timewalk_shift(tot)
             + rng.normal(0.0, intens.timewalk_jitter_ns, n_vis))
    t_vis = quantize_ns(np.maximum(t_vis, 0.0))

    ix = np.rint(pos[:, 0]).astype(np.int64)
    iy = np.rint(pos[:, 1]).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    ix, iy, t_vis, tot = ix[ok], iy[ok], t_vis[ok], tot[ok]
    order = np.argsort(t_vis, kind="stable")
    events = RawEvents(ix[order].astype(np.uint16), iy[order].astype(np.uint16),
                       t_vis[order], tot[order])

    # wall-drive sync edges, both polarities, camera clock with jitter
    f_wall = frame.omega_r / (2 * math.pi)
    n_periods = int(math.floor(exposure_s * f_wall))
    rising = np.arange(n_periods + 1) / f_wall
    falling = rising + 0.5 / f_wall
    t_edges = np.concatenate([rising, falling[falling < exposure_s]])
    pol = np.concatenate([np.ones(len(rising), np.uint8),
                          np.zeros(len(t_edges) - len(rising), np.uint8)])
    t_edges_cam = (t_edges * 1e9 / frame.c_tpx
                   + rng.normal(0.0, sync_jitter_ns, len(t_edges)))
    t_edges_cam = quantize_ns(np.maximum(t_edges_cam, 0.0))
    eorder = np.argsort(t_edges_cam, kind="stable")
    sync = SyncEdges(t_edges_cam[eorder], pol[eorder])

    truth = ShotTruth(rest_sites_px=rest.copy(), initial_bright=initial_bright.copy(),
                      flip_time_s=flips, photon_source=source,
                      photon_t_emit_s=t_emit, photon_t_cam_ns=t_cam_ns,
                      photon_lab_px=lab, frame=frame, exposure_s=exposure_s)
    return events, sync, truth


@dataclass
class PairResult:
    """A reference shot (all bright) and its detection shot."""

    ref_events: RawEvents
    ref_sync: SyncEdges
    ref_truth: ShotTruth
    det_events: RawEvents
    det_sync: SyncEdges
    det_truth: ShotTruth

    @property
    def det_initial_bright(self):
        return self.det_truth.initial_bright


def simulate_experiment_pair(crystal, illum, intens, base_frame, rng,
                             ref_exposure_s=0.020, det_exposure_s=0.010,
                             dark_fraction=0.5, det_initial_bright=None,
                             sync_jitter_ns=2.0):
    """Simulate a reference/detection shot pair sharing one crystal.

    The reference shot is prepared all bright; the detection shot draws each
    ion dark with probability dark_fraction unless det_initial_bright is
    given explicitly. Every shot gets a fresh rotation phase (a fresh t0).
    """
    n = crystal.n_ions
    period_cam_ns = 2 * math.pi / (base_frame.c_tpx * base_frame.omega_r) * 1e9

    def fresh_frame():
        return replace(base_frame, t0_ns=float(rng.uniform(0.0, period_cam_ns)))

    ref_frame = fresh_frame()
    ref = simulate_shot(crystal, illum, intens, ref_frame,
                        np.ones(n, bool), ref_exposure_s, rng,
                        sync_jitter_ns=sync_jitter_ns)
    if det_initial_bright is None:
        det_initial_bright = rng.random(n) >= dark_fraction
    det_frame = fresh_frame()
    det = simulate_shot(crystal, illum, intens, det_frame,
                        np.asarray(det_initial_bright, bool), det_exposure_s,
                        rng, sync_jitter_ns=sync_jitter_ns)
    return PairResult(*ref, *det)
