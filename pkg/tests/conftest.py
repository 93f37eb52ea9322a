"""Shared fixtures and helpers.

The "micro" scenario is an 8-ion system with a short lifetime window so the
whole calibration campaign runs in a few seconds; it exercises every pipeline
stage without the cost of a full-size crystal.
"""

import copy

import numpy as np
import pytest
from scipy.spatial import cKDTree

from rotion.config import ScenarioConfig
from rotion.discriminate import CalibrationModel
from rotion.frame import BinnedImage
from rotion.pipeline import build_calibration, prepare_bundle

MICRO_DOC = {
    "trap": {"n_ions": 8, "rotation_freq_hz": 25e3, "wall_delta": 0.05,
             "spacing_um": 35.0, "pixel_scale_um": 2.4},
    "illumination": {"rate_bright_coeffs": [30e3], "rate_dark_coeffs": [600.0],
                     "tau_bright_coeffs": [0.05], "tau_dark_coeffs": [0.010],
                     "background_rate_px_s": 20.0, "r_max_px": 40.0},
    "detection": {"bin_duration_s": 1e-3, "n_bins": 5, "roi_radius_px": 4.0},
    "frame": {"clock_skew_ppm": 4.0, "center_px": [128.0, 128.0],
              "crystal_seed": 1},
    "run": {"seed": 7, "n_pairs": 6, "ref_exposure_s": 0.020,
            "det_exposure_s": 0.005, "n_rate_pairs": 6, "n_lifetime_pairs": 5,
            "lifetime_exposure_s": 0.050, "rate_poly_degree": 1,
            "lifetime_radius_bins": 2, "timewalk_shots": 3,
            "timewalk_exposure_s": 0.004},
}


def micro_doc():
    return copy.deepcopy(MICRO_DOC)


@pytest.fixture(scope="session")
def micro_cfg():
    return ScenarioConfig.from_dict(micro_doc())


@pytest.fixture(scope="session")
def micro_bundle(micro_cfg):
    return prepare_bundle(micro_cfg)


@pytest.fixture(scope="session")
def micro_calib(micro_bundle):
    return build_calibration(micro_bundle)


def const_calib(lam_b, lam_d, tau_b=0.2, tau_d=0.012, bin_duration_s=1e-3,
                roi_radius_px=4.0):
    """Calibration with radius-independent rates for closed-form checks."""
    return CalibrationModel(
        rate_bright_coeffs=(float(lam_b),),
        rate_dark_coeffs=(float(lam_d),),
        tau_bright_coeffs=(float(tau_b),),
        tau_dark_coeffs=(float(tau_d),),
        r_min_px=0.0, r_max_px=120.0,
        roi_radius_px=roi_radius_px, bin_duration_s=bin_duration_s)


def gaussian_image(centers, amplitudes=300.0, sigma=2.0, shape=(256, 256),
                   background=0.0, origin=(0, 0)):
    """Noise-free sum of round Gaussian spots as a BinnedImage.

    centers are (x, y) in pixel-index coordinates before the origin offset.
    """
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    img = np.full(shape, float(background))
    amps = np.broadcast_to(np.asarray(amplitudes, float), (len(centers),))
    for (cx, cy), a in zip(centers, amps):
        img += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    return BinnedImage(counts=img, x0=float(origin[0]), y0=float(origin[1]),
                       n_dropped=0)


def one_to_one_matches(truth_xyt, found_xyt, r_px, dt_ns):
    """Count one-to-one pairings within a scaled space-time ball.

    Coordinates are scaled so a match means hypot(dx/r_px, dy/r_px,
    dt/dt_ns) <= 1; each found point is claimed at most once, closest
    truth first.
    """
    tx, ty, tt = truth_xyt
    fx, fy, ft = found_xyt
    if len(fx) == 0 or len(tx) == 0:
        return 0
    truth = np.column_stack([tx / r_px, ty / r_px, tt / dt_ns])
    found = np.column_stack([fx / r_px, fy / r_px, ft / dt_ns])
    d, j = cKDTree(found).query(truth, k=1, distance_upper_bound=1.0)
    used = np.zeros(len(fx), bool)
    n = 0
    for i in np.argsort(d):
        if not np.isfinite(d[i]):
            break
        if not used[j[i]]:
            used[j[i]] = True
            n += 1
    return n
