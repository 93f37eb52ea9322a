"""Ion localization: peak detection, Gaussian refinement, set matching."""

import numpy as np
import pytest

from conftest import gaussian_image
from rotion.frame import BinnedImage
from rotion.locate import (detect_ions, match_sites, refine_gaussian,
                           sites_to_csv)

SPOTS_12 = [(40.0, 40.0), (90.0, 38.0), (140.0, 44.0), (200.0, 50.0),
            (50.0, 100.0), (110.0, 102.0), (170.0, 96.0), (220.0, 110.0),
            (60.0, 170.0), (120.0, 180.0), (190.0, 168.0), (80.0, 220.0)]


def test_detect_clean_spots_exact():
    img = gaussian_image(SPOTS_12, amplitudes=300.0, sigma=2.0)
    sites = detect_ions(img)
    assert len(sites) == 12
    found = np.array([[s.x, s.y] for s in sites])
    report = match_sites(found, np.array(SPOTS_12), match_radius_px=2.0)
    assert report.precision == 1.0 and report.recall == 1.0
    assert np.max(np.hypot(report.dx, report.dy)) < 0.3
    amps = [s.amplitude for s in sites]
    assert amps == sorted(amps, reverse=True)
    assert min(amps) > 0


def test_detect_respects_min_separation():
    img = gaussian_image([(100.0, 100.0), (104.0, 100.0), (180.0, 60.0)],
                         amplitudes=300.0, sigma=2.0)
    sites = detect_ions(img, min_separation_px=7.0)
    assert len(sites) == 2                         # the 4 px pair merges


def test_detect_max_sites_keeps_brightest():
    amps = np.linspace(100.0, 400.0, 12)
    img = gaussian_image(SPOTS_12, amplitudes=amps, sigma=2.0)
    sites = detect_ions(img, max_sites=5)
    assert len(sites) == 5
    found = np.array([[s.x, s.y] for s in sites])
    brightest = np.array(SPOTS_12)[np.argsort(-amps)][:5]
    report = match_sites(found, brightest, match_radius_px=2.0)
    assert report.recall == 1.0


def test_detect_amplitude_floor_drops_dim_clumps():
    centers = SPOTS_12[:11] + [(230.0, 220.0)]
    amps = [300.0] * 11 + [30.0]                   # 10% of the median site
    img = gaussian_image(centers, amplitudes=amps, sigma=2.0)
    assert len(detect_ions(img, k_mad=0.5)) == 11
    assert len(detect_ions(img, k_mad=0.5, min_rel_amplitude=0.0)) == 12


def test_detect_on_poisson_noise():
    rng = np.random.default_rng(7)
    clean = gaussian_image(SPOTS_12, amplitudes=60.0, sigma=2.0, background=2.0)
    noisy = BinnedImage(counts=rng.poisson(clean.counts).astype(float),
                        x0=0.0, y0=0.0, n_dropped=0)
    sites = detect_ions(noisy)
    found = np.array([[s.x, s.y] for s in sites])
    report = match_sites(found, np.array(SPOTS_12), match_radius_px=2.5)
    assert report.precision == 1.0 and report.recall == 1.0


def test_detect_reports_in_image_origin_coordinates():
    img = gaussian_image([(100.0, 120.0)], amplitudes=300.0, sigma=2.0,
                         origin=(-128, -128))
    sites = detect_ions(img)
    assert len(sites) == 1
    assert abs(sites[0].x - (100.0 - 128.0)) < 0.3
    assert abs(sites[0].y - (120.0 - 128.0)) < 0.3


def _elliptical_image(cx, cy, amp, s_major, s_minor, theta, offset):
    yy, xx = np.mgrid[0:64, 0:64]
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    img = amp * np.exp(-0.5 * (u / s_major) ** 2 - 0.5 * (v / s_minor) ** 2)
    return BinnedImage(counts=img + offset, x0=0.0, y0=0.0, n_dropped=0)


def test_refine_gaussian_recovers_shape():
    truth = dict(cx=31.4, cy=30.2, amp=250.0, s_major=3.0, s_minor=1.8,
                 theta=0.5, offset=3.0)
    img = _elliptical_image(**truth)
    sites = detect_ions(img, k_mad=3.0)
    assert len(sites) == 1
    refined = refine_gaussian(img, sites, expected_sigma_px=2.5)[0]
    assert refined.fit_ok
    assert abs(refined.x_g - truth["cx"]) < 0.05
    assert abs(refined.y_g - truth["cy"]) < 0.05
    assert abs(refined.sigma_major / truth["s_major"] - 1) < 0.05
    assert abs(refined.sigma_minor / truth["s_minor"] - 1) < 0.05
    assert refined.sigma_major >= refined.sigma_minor
    assert -np.pi / 2 <= refined.theta < np.pi / 2
    assert abs(np.cos(2 * (refined.theta - truth["theta"])) - 1) < 1e-3
    assert abs(refined.offset - truth["offset"]) < 0.5


def test_refine_gaussian_fallback_keeps_coarse():
    from rotion.locate import IonSite
    # a blob far wider than the sigma bound rails the fit at the bound
    wide = _elliptical_image(cx=32.0, cy=32.0, amp=100.0, s_major=15.0,
                             s_minor=15.0, theta=0.0, offset=0.0)
    coarse = IonSite(x=32.0, y=32.0, amplitude=100.0)
    refined = refine_gaussian(wide, [coarse], expected_sigma_px=2.0)[0]
    assert not refined.fit_ok
    assert refined.x_g == 32.0 and refined.y_g == 32.0
    assert refined.sigma_major == 0.0              # coarse fields untouched

    # a window seeing only a remote spot's tail collapses the amplitude
    tail = _elliptical_image(cx=45.0, cy=47.0, amp=500.0, s_major=4.0,
                             s_minor=4.0, theta=0.0, offset=1.0)
    coarse = IonSite(x=32.0, y=32.0, amplitude=5.0)
    refined = refine_gaussian(tail, [coarse], expected_sigma_px=2.0)[0]
    assert not refined.fit_ok


def test_match_sites_greedy_one_to_one():
    ref = np.array([[0.0, 0.0], [10.0, 0.0], [40.0, 40.0]])
    found = np.array([[0.6, 0.0], [0.1, 0.0], [30.0, 0.0]])
    report = match_sites(found, ref, match_radius_px=5.0)
    assert report.pairs.tolist() == [[1, 0]]       # closest claim wins
    assert report.precision == pytest.approx(1 / 3)
    assert report.recall == pytest.approx(1 / 3)
    assert report.unmatched_found.tolist() == [0, 2]
    assert report.unmatched_reference.tolist() == [1, 2]
    assert report.n_matched == 1


def test_match_sites_empty_sides():
    ref = np.array([[0.0, 0.0]])
    r = match_sites(np.zeros((0, 2)), ref)
    assert r.precision == 1.0 and r.precision_defaulted
    assert r.recall == 0.0 and not r.recall_defaulted
    r = match_sites(ref, np.zeros((0, 2)))
    assert r.recall == 1.0 and r.recall_defaulted


def test_sites_to_csv(tmp_path):
    img = gaussian_image(SPOTS_12[:3], amplitudes=300.0, sigma=2.0)
    sites = refine_gaussian(img, detect_ions(img))
    path = tmp_path / "sites.csv"
    sites_to_csv(path, sites, comments=("demo",))
    lines = path.read_text().splitlines()
    assert lines[0] == "# demo"
    assert lines[1].startswith("x,y,amplitude,")
    assert len(lines) == 2 + 3
