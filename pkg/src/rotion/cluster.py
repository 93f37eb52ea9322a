"""Spatiotemporal clustering of VIS splats back into single UV photons.

A UV photon hitting the intensifier produces a small splat of VIS events
spread over neighbouring pixels within a short time window. Events are
grouped with DBSCAN under the combined metric

    d = sqrt(dx^2 + dy^2 + (dt / time_scale)^2)

with time_scale = 50 ns and eps = 2 by default. With min_pts = 1 every
event is a core point, so clusters are exactly the connected components of
the eps-neighbourhood graph and no noise class exists. Events are processed
time sorted, so only pairs within eps * time_scale of each other in time
need distance checks; that keeps the pass linear at realistic rates.

Each cluster is reduced to a UV hit with the tot-weighted mean position and
the minimal arrival time after per-event time-walk correction. The
correction table is calibrated from multi-event clusters by comparing every
member's arrival against the largest-tot member of its own cluster.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InsufficientDataError

EPS_DEFAULT = 2.0
TIME_SCALE_NS_DEFAULT = 50.0


@dataclass
class UVHits:
    """Reconstructed UV photons (one row per cluster), time sorted."""

    x: np.ndarray
    y: np.ndarray
    t_ns: np.ndarray
    n_vis: np.ndarray
    tot_sum_ns: np.ndarray

    def __len__(self):
        return len(self.x)

    def take(self, index):
        return UVHits(self.x[index], self.y[index], self.t_ns[index],
                      self.n_vis[index], self.tot_sum_ns[index])

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, np.zeros(0, np.int64), z)


@njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True, fastmath=True)
def _label_union(t, x, y, eps, time_scale):
    """Connected components under the combined metric (min_pts = 1 path)."""
    n = t.size
    parent = np.empty(n, np.int64)
    for i in range(n):
        parent[i] = i
    eps2 = eps * eps
    window = eps * time_scale
    inv_ts = 1.0 / time_scale
    j0 = 0
    for i in range(n):
        ti = t[i]
        while ti - t[j0] > window:
            j0 += 1
        xi = x[i]
        yi = y[i]
        for j in range(j0, i):
            dt = (ti - t[j]) * inv_ts
            d2 = dt * dt
            if d2 > eps2:
                continue
            dx = xi - x[j]
            dy = yi - y[j]
            d2 += dx * dx + dy * dy
            if d2 <= eps2:
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj
    labels = np.empty(n, np.int64)
    next_id = 0
    for i in range(n):
        r = _find(parent, i)
        if r == i:
            labels[i] = next_id
            next_id += 1
        else:
            labels[i] = labels[r]
    return labels, next_id


@njit(cache=True)
def _label_dbscan(t, x, y, eps, time_scale, min_pts):
    """Full DBSCAN with core/border/noise semantics for min_pts > 1."""
    n = t.size
    eps2 = eps * eps
    window = eps * time_scale
    inv_ts = 1.0 / time_scale
    counts = np.ones(n, np.int64)  # each point is its own neighbour
    j0 = 0
    for i in range(n):
        ti = t[i]
        while ti - t[j0] > window:
            j0 += 1
        for j in range(j0, i):
            dt = (ti - t[j]) * inv_ts
            d2 = dt * dt
            if d2 > eps2:
                continue
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            d2 += dx * dx + dy * dy
            if d2 <= eps2:
                counts[i] += 1
                counts[j] += 1
    core = counts >= min_pts
    parent = np.empty(n, np.int64)
    for i in range(n):
        parent[i] = i
    best_core = np.full(n, -1, np.int64)
    best_d2 = np.full(n, np.inf)
    j0 = 0
    for i in range(n):
        ti = t[i]
        while ti - t[j0] > window:
            j0 += 1
        for j in range(j0, i):
            dt = (ti - t[j]) * inv_ts
            d2 = dt * dt
            if d2 > eps2:
                continue
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            d2 += dx * dx + dy * dy
            if d2 > eps2:
                continue
            if core[i] and core[j]:
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj
            elif core[j] and not core[i]:
                if d2 < best_d2[i]:
                    best_d2[i] = d2
                    best_core[i] = j
            elif core[i] and not core[j]:
                if d2 < best_d2[j]:
                    best_d2[j] = d2
                    best_core[j] = i
    labels = np.full(n, -1, np.int64)
    next_id = 0
    for i in range(n):
        if core[i]:
            r = _find(parent, i)
            if r == i:
                labels[i] = next_id
                next_id += 1
            else:
                labels[i] = labels[r]
    for i in range(n):
        if not core[i] and best_core[i] >= 0:
            labels[i] = labels[_find(parent, best_core[i])]
    return labels, next_id


@njit(cache=True)
def _aggregate(labels, t_corr, x, y, tot, n_clusters):
    sum_tot = np.zeros(n_clusters)
    sum_x = np.zeros(n_clusters)
    sum_y = np.zeros(n_clusters)
    min_t = np.full(n_clusters, np.inf)
    count = np.zeros(n_clusters, np.int64)
    for i in range(labels.size):
        lab = labels[i]
        if lab < 0:
            continue
        w = tot[i]
        sum_tot[lab] += w
        sum_x[lab] += w * x[i]
        sum_y[lab] += w * y[i]
        if t_corr[i] < min_t[lab]:
            min_t[lab] = t_corr[i]
        count[lab] += 1
    return sum_x / sum_tot, sum_y / sum_tot, min_t, count, sum_tot


def _sorted_order(t_ns):
    # events usually arrive time sorted; avoid the argsort when they do
    if len(t_ns) < 2 or np.all(t_ns[1:] >= t_ns[:-1]):
        return None
    return np.argsort(t_ns, kind="stable")


def dbscan_cluster(events, eps=EPS_DEFAULT, time_scale_ns=TIME_SCALE_NS_DEFAULT,
                   min_pts=1):
    """Cluster events; returns (labels in input order, n_clusters).

    Labels are consecutive integers ordered by first appearance in time;
    with min_pts > 1 unclaimed points get label -1 (noise).
    """
    if eps <= 0 or time_scale_ns <= 0 or min_pts < 1:
        raise ValueError("eps, time_scale_ns must be positive, min_pts >= 1")
    n = len(events)
    if n == 0:
        return np.zeros(0, np.int64), 0
    order = _sorted_order(events.t_ns)
    t = events.t_ns if order is None else events.t_ns[order]
    x = events.x.astype(np.float64) if order is None else events.x[order].astype(np.float64)
    y = events.y.astype(np.float64) if order is None else events.y[order].astype(np.float64)
    if min_pts == 1:
        labels, k = _label_union(t, x, y, float(eps), float(time_scale_ns))
    else:
        labels, k = _label_dbscan(t, x, y, float(eps), float(time_scale_ns),
                                  int(min_pts))
    if order is not None:
        out = np.empty(n, np.int64)
        out[order] = labels
        labels = out
    return labels, k


@dataclass
class TimewalkTable:
    """Per-tot arrival-time correction, normalized to 0 at the largest tot bin."""

    edges_ns: np.ndarray        # K+1 bin edges
    correction_ns: np.ndarray   # K corrections, subtract from event times
    n_samples: np.ndarray       # samples behind each bin
    inherited: np.ndarray       # True where a sparse bin copied a neighbour

    def correction_for(self, tot_ns):
        tot_ns = np.asarray(tot_ns)
        k = len(self.correction_ns)
        width = (self.edges_ns[-1] - self.edges_ns[0]) / k
        uniform = width > 0 and np.allclose(
            np.diff(self.edges_ns), width, rtol=1e-9, atol=0.0)
        if uniform:
            # equal bins admit direct indexing, much cheaper than a binary
            # search across millions of events
            idx = ((tot_ns - self.edges_ns[0]) / width).astype(np.int64)
        else:
            idx = np.searchsorted(self.edges_ns, tot_ns, side="right") - 1
        idx = np.clip(idx, 0, k - 1)
        return self.correction_ns[idx]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# rotion timewalk table v1\n")
            fh.write("# lo_ns hi_ns correction_ns n_samples inherited\n")
            for k in range(len(self.correction_ns)):
                fh.write(f"{self.edges_ns[k]:.6f} {self.edges_ns[k + 1]:.6f} "
                         f"{self.correction_ns[k]:.6f} {int(self.n_samples[k])} "
                         f"{int(self.inherited[k])}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            first = fh.readline()
            if "timewalk table v1" not in first:
                raise ValueError(f"not a timewalk table: {path}")
            rows = [line.split() for line in fh
                    if line.strip() and not line.startswith("#")]
        arr = np.array(rows, dtype=np.float64)
        edges = np.append(arr[:, 0], arr[-1, 1])
        return cls(edges, arr[:, 2], arr[:, 3].astype(np.int64),
                   arr[:, 4].astype(bool))

    @classmethod
    def identity(cls, tot_max_ns=1000.0):
        return cls(np.array([0.0, tot_max_ns]), np.zeros(1),
                   np.zeros(1, np.int64), np.zeros(1, bool))


def _cluster_offsets(events, labels):
    """Per-event (tot, arrival offset) against the largest-tot cluster member.

    Only clusters with at least two events contribute; reference events are
    excluded since their offset is identically zero.
    """
    n = len(events)
    if n == 0:
        return np.zeros(0), np.zeros(0)
    valid = labels >= 0
    if not np.any(valid):
        return np.zeros(0), np.zeros(0)
    sizes = np.bincount(labels[valid])
    keep = valid & (sizes[np.clip(labels, 0, None)] >= 2)
    if not np.any(keep):
        return np.zeros(0), np.zeros(0)
    lab = labels[keep]
    t = events.t_ns[keep]
    tot = events.tot_ns[keep]
    # reference per cluster: max tot, ties broken by earliest arrival
    order = np.lexsort((t, -tot, lab))
    lab_sorted = lab[order]
    first = np.ones(len(lab_sorted), bool)
    first[1:] = lab_sorted[1:] != lab_sorted[:-1]
    ref_positions = order[first]
    ref_t = np.zeros(sizes.size)
    ref_idx = np.zeros(sizes.size, np.int64)
    ref_t[lab_sorted[first]] = t[ref_positions]
    ref_idx[lab_sorted[first]] = ref_positions
    is_ref = np.zeros(len(lab), bool)
    is_ref[ref_positions] = True
    member = ~is_ref
    return tot[member], t[member] - ref_t[lab[member]]


def calibrate_timewalk(shots, bin_width_ns=25.0, tot_max_ns=None,
                       min_samples=20):
    """Build a TimewalkTable from clustered shots.

    Arguments:
        shots: iterable of (RawEvents, labels) pairs, labels as returned by
            dbscan_cluster.
        bin_width_ns: tot bin width.
        tot_max_ns: upper edge of the last bin (default: observed max).
        min_samples: bins with fewer samples inherit the nearest populated
            bin's correction and are flagged.

    The table is normalized so the correction at the largest populated tot
    bin is zero; large-tot events walk least and serve as the anchor.
    """
    tots, offs = [], []
    for events, labels in shots:
        a, b = _cluster_offsets(events, labels)
        tots.append(a)
        offs.append(b)
    tot = np.concatenate(tots) if tots else np.zeros(0)
    off = np.concatenate(offs) if offs else np.zeros(0)
    if len(tot) == 0:
        raise InsufficientDataError("no multi-event clusters to calibrate from")
    if tot_max_ns is None:
        tot_max_ns = float(tot.max())
    n_bins = max(1, int(np.ceil(tot_max_ns / bin_width_ns)))
    edges = np.arange(n_bins + 1, dtype=np.float64) * bin_width_ns
    bin_idx = np.clip((tot // bin_width_ns).astype(np.int64), 0, n_bins - 1)

    med = np.zeros(n_bins)
    pop = np.zeros(n_bins, np.int64)
    order = np.argsort(bin_idx, kind="stable")
    sorted_bins = bin_idx[order]
    sorted_off = off[order]
    starts = np.searchsorted(sorted_bins, np.arange(n_bins))
    stops = np.searchsorted(sorted_bins, np.arange(n_bins) + 1)
    for k in range(n_bins):
        seg = sorted_off[starts[k]:stops[k]]
        pop[k] = len(seg)
        if len(seg):
            med[k] = np.median(seg)

    populated = np.flatnonzero(pop >= min_samples)
    if len(populated) == 0:
        report = ", ".join(f"[{edges[k]:.0f},{edges[k + 1]:.0f}):{pop[k]}"
                           for k in range(n_bins) if pop[k])
        raise InsufficientDataError(
            f"no tot bin reaches {min_samples} samples; populations: {report}")
    inherited = np.ones(n_bins, bool)
    inherited[populated] = False
    correction = med.copy()
    for k in range(n_bins):
        if inherited[k]:
            nearest = populated[np.argmin(np.abs(populated - k))]
            correction[k] = med[nearest]
    correction = correction - correction[populated[-1]]
    return TimewalkTable(edges, correction, pop, inherited)


def apply_timewalk(events, table):
    """Corrected arrival times (table may be None for the identity)."""
    if table is None:
        return events.t_ns.copy()
    return events.t_ns - table.correction_for(events.tot_ns)


def reconstruct_uv(events, table=None, eps=EPS_DEFAULT,
                   time_scale_ns=TIME_SCALE_NS_DEFAULT, min_pts=1):
    """Cluster a raw event stream and reduce every cluster to one UV hit.

    Position is the tot-weighted mean of the member events; time is the
    minimal time-walk-corrected arrival. Returns UVHits sorted by time.
    An empty stream returns an empty result rather than an error.
    """
    n = len(events)
    if n == 0:
        return UVHits.empty()
    labels, k = dbscan_cluster(events, eps=eps, time_scale_ns=time_scale_ns,
                               min_pts=min_pts)
    if k == 0:
        return UVHits.empty()
    t_corr = apply_timewalk(events, table)
    cx, cy, tmin, count, tot_sum = _aggregate(
        labels, t_corr, events.x.astype(np.float64),
        events.y.astype(np.float64), events.tot_ns, k)
    hits = UVHits(cx, cy, tmin, count, tot_sum)
    order = np.argsort(tmin, kind="stable")
    if np.any(order[1:] < order[:-1]):
        hits = hits.take(order)
    return hits
