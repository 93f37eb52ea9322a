"""Raw detector events, wall-clock sync edges and camera timebase estimation.

Events carry pixel coordinates, an arrival timestamp and a time-over-threshold
value. Timestamps and tot live on the detector tick grid of 25/16 ns; file
round trips are exact because every quantity is an integer number of ticks.

Sync edges are timestamps of a square-wave signal derived from the experiment
clock. Comparing their measured period against the nominal one gives the
small relative scale factor between the camera clock and the experiment
clock, which multiplies the nominal rotation frequency during derotation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, InsufficientDataError

TICK_NS = 25.0 / 16.0  # 1.5625 ns detector clock tick
TICK_FS = 1_562_500    # the same tick in femtoseconds (integer, for file headers)

EVENTS_MAGIC = b"SPNF"
EVENTS_VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("tick_fs", "<u4"),
                    ("reserved", "S6")])
_EVENT_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("tot", "<u2")])
_SYNC_RECORD = np.dtype([("t", "<u8"), ("polarity", "u1")])

POLARITY_RISING = 1
POLARITY_FALLING = 0


def quantize_ns(t_ns, tick_ns=TICK_NS):
    """Snap times (ns) onto the detector tick grid."""
    return np.rint(np.asarray(t_ns, dtype=np.float64) / tick_ns) * tick_ns


@dataclass
class RawEvents:
    """Column-oriented stream of detector hits.

    x, y are integer pixel coordinates stored as uint16; t_ns and tot_ns are
    float64 nanoseconds, always integer multiples of the tick.
    """

    x: np.ndarray
    y: np.ndarray
    t_ns: np.ndarray
    tot_ns: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.uint16)
        self.y = np.ascontiguousarray(self.y, dtype=np.uint16)
        self.t_ns = np.ascontiguousarray(self.t_ns, dtype=np.float64)
        self.tot_ns = np.ascontiguousarray(self.tot_ns, dtype=np.float64)
        n = len(self.x)
        if not (len(self.y) == len(self.t_ns) == len(self.tot_ns) == n):
            raise ValueError("event columns have mismatched lengths")

    def __len__(self):
        return len(self.x)

    def take(self, index):
        return RawEvents(self.x[index], self.y[index], self.t_ns[index],
                         self.tot_ns[index])

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z, z, z, z)

    @classmethod
    def concatenate(cls, streams):
        return cls(np.concatenate([s.x for s in streams]),
                   np.concatenate([s.y for s in streams]),
                   np.concatenate([s.t_ns for s in streams]),
                   np.concatenate([s.tot_ns for s in streams]))


@dataclass
class SyncEdges:
    """Timestamped edges of the wall-drive sync signal."""

    t_ns: np.ndarray
    polarity: np.ndarray  # 1 rising, 0 falling

    def __post_init__(self):
        self.t_ns = np.ascontiguousarray(self.t_ns, dtype=np.float64)
        self.polarity = np.ascontiguousarray(self.polarity, dtype=np.uint8)
        if len(self.t_ns) != len(self.polarity):
            raise ValueError("edge columns have mismatched lengths")

    def __len__(self):
        return len(self.t_ns)


@dataclass
class TimebaseModel:
    """Camera-clock scale factor and how it was obtained.

    c_tpx multiplies the nominal rotation frequency to give the effective
    rotation frequency in camera timestamps. It sits within a few ppm of 1;
    construction rejects anything further than 1e-3 out as a wiring error.
    """

    c_tpx: float
    residual_rms_ns: float = 0.0
    n_edges_used: int = 0
    polarity_used: int = POLARITY_RISING
    period_cam_ns: float = field(default=0.0, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.c_tpx) or abs(self.c_tpx - 1.0) >= 1e-3:
            raise ValueError(
                f"implausible camera clock ratio c_tpx={self.c_tpx!r}")

    def corrected_rotation_frequency(self, omega_r):
        """Effective angular rotation frequency in the camera timebase."""
        return self.c_tpx * omega_r


def estimate_timebase(edges, nominal_wall_freq_hz):
    """Estimate the camera clock ratio from sync edge timestamps.

    Fits a least-squares line to timestamp versus edge index for the majority
    polarity; the slope is the wall period as measured by the camera clock.
    c_tpx = nominal period / measured period, so that multiplying the nominal
    rotation frequency by c_tpx reproduces the crystal phase as a function of
    camera timestamps.

    Arguments:
        edges: SyncEdges, time ordered.
        nominal_wall_freq_hz: wall drive frequency per the experiment clock.

    Returns:
        TimebaseModel.
    """
    if nominal_wall_freq_hz <= 0:
        raise ValueError("nominal_wall_freq_hz must be positive")
    t = edges.t_ns
    if len(t) and np.any(np.diff(t) < 0):
        raise ValueError("sync edge timestamps are not time ordered")

    n_rising = int(np.count_nonzero(edges.polarity == POLARITY_RISING))
    n_falling = len(t) - n_rising
    pol = POLARITY_RISING if n_rising >= n_falling else POLARITY_FALLING
    t_sel = t[edges.polarity == pol]
    n = len(t_sel)
    if n < 2:
        raise InsufficientDataError(
            f"need at least 2 same-polarity edges, got {n}")

    idx = np.arange(n, dtype=np.float64)
    # centering keeps the normal equations well conditioned for long runs
    slope, intercept = np.polyfit(idx - idx.mean(), t_sel - t_sel.mean(), 1)
    if slope <= 0:
        raise InsufficientDataError("non-positive fitted sync period")
    resid = (t_sel - t_sel.mean()) - (slope * (idx - idx.mean()) + intercept)
    period_nominal_ns = 1e9 / nominal_wall_freq_hz
    return TimebaseModel(
        c_tpx=period_nominal_ns / slope,
        residual_rms_ns=float(np.sqrt(np.mean(resid ** 2))),
        n_edges_used=n,
        polarity_used=pol,
        period_cam_ns=float(slope),
    )


def write_events(path, events, tick_fs=TICK_FS):
    """Write events as the binary record format (header + packed records)."""
    tick_ns = tick_fs * 1e-6
    t_ticks = np.rint(events.t_ns / tick_ns)
    tot_ticks = np.rint(events.tot_ns / tick_ns)
    if np.any(t_ticks < 0) or np.any(t_ticks > np.iinfo(np.uint64).max):
        raise ValueError("timestamp outside file range")
    if np.any(tot_ticks < 0) or np.any(tot_ticks > np.iinfo(np.uint16).max):
        raise ValueError("tot outside file range")
    header = np.zeros(1, dtype=_HEADER)
    header["magic"] = EVENTS_MAGIC
    header["version"] = EVENTS_VERSION
    header["tick_fs"] = tick_fs
    rec = np.zeros(len(events), dtype=_EVENT_RECORD)
    rec["x"] = events.x
    rec["y"] = events.y
    rec["t"] = t_ticks.astype(np.uint64)
    rec["tot"] = tot_ticks.astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())


def read_events(path):
    """Read a binary event file. Returns (RawEvents, tick_ns).

    Raises DecodeError naming the byte offset of the first problem.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.itemsize:
        raise DecodeError("truncated header", len(blob))
    header = np.frombuffer(blob[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header["magic"]) != EVENTS_MAGIC:
        raise DecodeError(f"bad magic {bytes(header['magic'])!r}", 0)
    if int(header["version"]) != EVENTS_VERSION:
        raise DecodeError(f"unsupported version {int(header['version'])}", 4)
    tick_fs = int(header["tick_fs"])
    if tick_fs <= 0:
        raise DecodeError("non-positive tick", 6)
    body = blob[_HEADER.itemsize:]
    n, extra = divmod(len(body), _EVENT_RECORD.itemsize)
    if extra:
        raise DecodeError("trailing partial record",
                          _HEADER.itemsize + n * _EVENT_RECORD.itemsize)
    rec = np.frombuffer(body, dtype=_EVENT_RECORD)
    tick_ns = tick_fs * 1e-6
    events = RawEvents(rec["x"].copy(), rec["y"].copy(),
                       rec["t"].astype(np.float64) * tick_ns,
                       rec["tot"].astype(np.float64) * tick_ns)
    return events, tick_ns


def write_sync(path, edges, tick_fs=TICK_FS):
    """Write sync edges as the headerless sidecar record format."""
    tick_ns = tick_fs * 1e-6
    rec = np.zeros(len(edges), dtype=_SYNC_RECORD)
    t_ticks = np.rint(edges.t_ns / tick_ns)
    if np.any(t_ticks < 0):
        raise ValueError("negative sync timestamp")
    rec["t"] = t_ticks.astype(np.uint64)
    rec["polarity"] = edges.polarity
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def read_sync(path, tick_fs=TICK_FS):
    """Read a sync sidecar written by write_sync."""
    with open(path, "rb") as fh:
        blob = fh.read()
    n, extra = divmod(len(blob), _SYNC_RECORD.itemsize)
    if extra:
        raise DecodeError("trailing partial sync record", n * _SYNC_RECORD.itemsize)
    rec = np.frombuffer(blob, dtype=_SYNC_RECORD)
    tick_ns = tick_fs * 1e-6
    return SyncEdges(rec["t"].astype(np.float64) * tick_ns, rec["polarity"].copy())
