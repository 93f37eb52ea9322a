"""Rotating-frame transform, image binning and rotation-center search.

Each photon is rotated back by the crystal phase accumulated since a
reference time t0:

    alpha_i = c_tpx * omega_r * (t_i - t0)
    [x_R, y_R]^T = [[cos a, -sin a], [sin a, cos a]] . (p_i - center)

The rotation center is not known a priori; it is found by minimising the
inverse summed Sobel gradient magnitude of the binned rest-frame image with
a Nelder-Mead simplex search, which rewards the center choice that produces
the sharpest spots.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import CenterSearchError


@dataclass
class RotationFrame:
    """Parameters tying camera timestamps to the crystal rotation phase."""

    omega_r: float              # nominal angular frequency, rad/s
    c_tpx: float = 1.0          # camera clock ratio from the sync fit
    t0_ns: float = 0.0          # phase reference time, camera clock
    center_px: tuple = (128.0, 128.0)

    def angles(self, t_ns):
        """Accumulated rotation angle (rad) at camera timestamps t_ns."""
        return self.c_tpx * self.omega_r * (np.asarray(t_ns) - self.t0_ns) * 1e-9


@dataclass
class RestPoints:
    """Points in the co-rotating (rest) frame, origin at the rotation center."""

    x: np.ndarray
    y: np.ndarray
    t_ns: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, index):
        return RestPoints(self.x[index], self.y[index], self.t_ns[index])


@njit(cache=True)
def _derotate_kernel(x, y, t_ns, rate, t0_ns, cx, cy):
    # single fused pass; the vectorized form walks ~10 full-size temporaries.
    # The angle is computed with the exact operation order of
    # RotationFrame.angles so derotate and rerotate agree to the bit; any
    # prefactor rounding difference would be amplified by the accumulated
    # angle (~1e5 rad over a second).
    n = x.size
    rx = np.empty(n)
    ry = np.empty(n)
    for i in range(n):
        a = rate * (t_ns[i] - t0_ns) * 1e-9
        ca = np.cos(a)
        sa = np.sin(a)
        dx = x[i] - cx
        dy = y[i] - cy
        rx[i] = ca * dx - sa * dy
        ry[i] = sa * dx + ca * dy
    return rx, ry


def derotate(hits, frame):
    """Transform lab-frame hits into the co-rotating frame.

    Arguments:
        hits: anything with x, y, t_ns array attributes (RawEvents, UVHits).
        frame: RotationFrame.

    Returns:
        RestPoints with the same timestamps.
    """
    x = np.asarray(hits.x, dtype=np.float64)
    y = np.asarray(hits.y, dtype=np.float64)
    t = np.asarray(hits.t_ns, dtype=np.float64)
    rx, ry = _derotate_kernel(x, y, t, frame.c_tpx * frame.omega_r,
                              float(frame.t0_ns), float(frame.center_px[0]),
                              float(frame.center_px[1]))
    return RestPoints(rx, ry, t.copy())


def rerotate(points, frame):
    """Inverse of derotate: map rest-frame points back to the lab frame."""
    a = frame.angles(points.t_ns)
    ca, sa = np.cos(a), np.sin(a)
    x = ca * points.x + sa * points.y + frame.center_px[0]
    y = -sa * points.x + ca * points.y + frame.center_px[1]
    return x, y


@dataclass
class BinnedImage:
    """Rest-frame histogram image.

    counts[iy, ix] covers rest coordinates (ix + x0, iy + y0) with pixel
    centers on integers, so a point at rest (0, 0) lands in the center pixel.
    """

    counts: np.ndarray
    x0: float
    y0: float
    n_dropped: int = 0

    @property
    def shape(self):
        return self.counts.shape

    def normalized(self):
        m = self.counts.max()
        if m <= 0:
            raise ValueError("cannot normalize an all-zero image")
        return self.counts / m


def bin_image(points, shape=(256, 256), origin=None):
    """Accumulate rest-frame points into a pixel histogram.

    Points map to the nearest pixel center; anything outside the extent is
    dropped and counted in n_dropped. The default origin centers the image
    on the rotation axis.
    """
    ny, nx = shape
    if origin is None:
        origin = (-(nx // 2), -(ny // 2))
    x0, y0 = origin
    ix = np.rint(np.asarray(points.x) - x0).astype(np.int64)
    iy = np.rint(np.asarray(points.y) - y0).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    flat = np.bincount(iy[ok] * nx + ix[ok], minlength=nx * ny)
    return BinnedImage(flat.reshape(ny, nx).astype(np.float64), float(x0),
                       float(y0), int(len(ix) - np.count_nonzero(ok)))


def sharpness_cost(image, smooth_px=0.0):
    """Inverse summed Sobel gradient magnitude of the count-normalized image.

    Sharper images have stronger gradients and therefore lower cost. The
    image is normalized by its total count, not its peak: the total is
    invariant under recentering, so defocus can only lower the gradient
    sum and raise the cost, whereas a peak-normalized cost falls under
    blur (the peak drops faster than the gradient sum) and would reward a
    wrong center. smooth_px > 0 applies a Gaussian blur first, which
    suppresses the per-pixel shot-noise contribution to the gradient sum.

    The all-zero image has no defined cost and raises ValueError; a
    perfectly flat non-zero image has zero gradient everywhere and
    returns +inf.
    """
    counts = image.counts if isinstance(image, BinnedImage) else np.asarray(image)
    total_counts = counts.sum()
    if total_counts <= 0:
        raise ValueError("sharpness cost undefined for an all-zero image")
    norm = counts / total_counts
    if smooth_px > 0:
        norm = ndimage.gaussian_filter(norm, smooth_px)
    gx = ndimage.sobel(norm, axis=1)
    gy = ndimage.sobel(norm, axis=0)
    total = float(np.sqrt(gx * gx + gy * gy).sum())
    if total <= 0:
        return float("inf")
    return 1.0 / total


@dataclass
class CenterResult:
    center_px: tuple
    cost: float
    n_iterations: int
    converged: bool
    n_restarts: int = 0


def _center_cost(cx, cy, px, py, ca, sa, shape, smooth_px):
    # rest = R(a) p - R(a) c, with R(a) p precomputed by the caller
    rx = px - (ca * cx - sa * cy)
    ry = py - (sa * cx + ca * cy)
    img = bin_image(RestPoints(rx, ry, None), shape=shape)
    try:
        return sharpness_cost(img, smooth_px=smooth_px)
    except ValueError:
        return float("inf")


def _simplex_search(cost, start, edge, tol, max_iter):
    """One Nelder-Mead run; returns (vertices, costs, iterations, converged)."""
    start = np.asarray(start, dtype=np.float64)
    sim = np.array([start, start + (edge, 0.0), start + (0.0, edge)])
    fs = np.array([cost(v) for v in sim])
    converged = False
    it = 0
    while it < max_iter:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        diam = max(np.linalg.norm(sim[i] - sim[j])
                   for i in range(3) for j in range(i + 1, 3))
        if diam < tol:
            converged = True
            break
        it += 1
        centroid = sim[:2].mean(axis=0)
        xr = centroid + (centroid - sim[2])
        fr = cost(xr)
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[2])
            fe = cost(xe)
            sim[2], fs[2] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[1]:
            sim[2], fs[2] = xr, fr
        else:
            xc = centroid + 0.5 * ((xr if fr < fs[2] else sim[2]) - centroid)
            fc = cost(xc)
            if fc < min(fr, fs[2]):
                sim[2], fs[2] = xc, fc
            else:
                sim[1:] = sim[0] + 0.5 * (sim[1:] - sim[0])
                fs[1:] = [cost(v) for v in sim[1:]]
    return sim, fs, it, converged


def find_center(hits, frame, initial_guess=None, shape=(256, 256),
                simplex_edge=5.0, diameter_tol=0.05, max_iter=200,
                max_restarts=1, smooth_px=1.5, coarse_smooth_px=6.0,
                coarse_tol=0.5):
    """Locate the rotation center by simplex search on the sharpness cost.

    Runs a standard Nelder-Mead simplex (reflection 1, expansion 2,
    contraction 0.5, shrink 0.5) over the center coordinates, starting from
    initial_guess (default: the frame's current center) with an initial
    simplex edge of simplex_edge pixels. The search stops when the simplex
    diameter falls below diameter_tol or after max_iter iterations; an
    unconverged search is restarted once from its best vertex.

    The search runs as a two-scale continuation. A center error of d
    smears every ion into a ring of radius d, and once d reaches about
    half the ion spacing the overlapping rings re-form sharp structure,
    leaving a false cost minimum that captures the simplex from a few
    pixels out. The first pass therefore evaluates the cost under a heavy
    coarse_smooth_px blur, which erases that sub-spacing structure and
    leaves a basin that is monotone over tens of pixels, and stops at
    coarse_tol. The second pass refines from there under smooth_px, just
    enough smoothing to keep pixel shot noise from trapping the simplex,
    and converges to diameter_tol. Setting coarse_smooth_px to None or to
    a value <= smooth_px skips the coarse pass.

    Returns CenterResult. Raises CenterSearchError when a candidate center
    produces a non-finite cost, ValueError for empty input.
    """
    if len(hits) == 0:
        raise ValueError("cannot search for a center with no hits")
    guess = np.asarray(initial_guess if initial_guess is not None
                       else frame.center_px, dtype=np.float64)

    a = frame.angles(hits.t_ns)
    ca, sa = np.cos(a), np.sin(a)
    x = np.asarray(hits.x, dtype=np.float64)
    y = np.asarray(hits.y, dtype=np.float64)
    px = ca * x - sa * y
    py = sa * x + ca * y

    def cost_at(v, s):
        c = _center_cost(v[0], v[1], px, py, ca, sa, shape, s)
        if not np.isfinite(c):
            raise CenterSearchError(
                f"non-finite sharpness cost at center ({v[0]:.3f}, {v[1]:.3f})")
        return c

    total_iter = 0
    edge = simplex_edge
    if coarse_smooth_px is not None and coarse_smooth_px > smooth_px:
        sim, fs, it, _ = _simplex_search(
            lambda v: cost_at(v, coarse_smooth_px), guess, simplex_edge,
            coarse_tol, max_iter)
        total_iter += it
        guess = sim[int(np.argmin(fs))]
        edge = max(2.0 * coarse_tol, 10.0 * diameter_tol)

    restarts = 0
    while True:
        sim, fs, it, converged = _simplex_search(
            lambda v: cost_at(v, smooth_px), guess, edge, diameter_tol,
            max_iter)
        total_iter += it
        if converged or restarts >= max_restarts:
            best = int(np.argmin(fs))
            return CenterResult(center_px=(float(sim[best, 0]), float(sim[best, 1])),
                                cost=float(fs[best]), n_iterations=total_iter,
                                converged=converged, n_restarts=restarts)
        # restart from the best vertex with a fresh, smaller simplex
        guess = sim[int(np.argmin(fs))]
        edge = max(edge * 0.5, 10 * diameter_tol)
        restarts += 1


def write_pgm(path, counts):
    """Dump an image as a binary 8-bit PGM, scaled to the full gray range."""
    arr = np.asarray(counts, dtype=np.float64)
    m = arr.max()
    scaled = np.zeros_like(arr, dtype=np.uint8) if m <= 0 else \
        np.clip(np.rint(arr / m * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())


def write_image_csv(path, counts, comments=()):
    arr = np.asarray(counts)
    header = "".join(f"# {line}\n" for line in comments)
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, arr, fmt="%.6g", delimiter=",")
