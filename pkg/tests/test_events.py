"""Binary event I/O, tick quantization and clock-skew estimation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotion.errors import DecodeError, InsufficientDataError
from rotion.events import (POLARITY_FALLING, POLARITY_RISING, TICK_NS,
                           RawEvents, SyncEdges, TimebaseModel,
                           estimate_timebase, quantize_ns, read_events,
                           read_sync, write_events, write_sync)

HEADER_BYTES = 16
EVENT_BYTES = 14
SYNC_BYTES = 9


def _events_on_grid(rng, n=200):
    t = quantize_ns(np.sort(rng.uniform(0, 1e7, n)))
    tot = quantize_ns(rng.uniform(25, 600, n))
    x = rng.integers(0, 256, n).astype(np.uint16)
    y = rng.integers(0, 256, n).astype(np.uint16)
    return RawEvents(x, y, t, tot)


def test_quantize_snaps_to_tick_grid():
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 1e9, 1000)
    q = quantize_ns(t)
    ticks = q / TICK_NS
    assert np.allclose(ticks, np.rint(ticks), atol=1e-9)
    assert np.max(np.abs(q - t)) <= TICK_NS / 2 + 1e-12
    # idempotent
    assert np.array_equal(quantize_ns(q), q)


def test_quantize_custom_tick():
    assert quantize_ns(10.4, tick_ns=1.0) == 10.0
    assert quantize_ns(10.6, tick_ns=1.0) == 11.0


@given(st.integers(min_value=0, max_value=2**40))
def test_quantize_exact_on_grid(k):
    t = k * TICK_NS
    assert quantize_ns(t) == t


def test_events_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    events = _events_on_grid(rng)
    path = tmp_path / "a.events"
    write_events(path, events)
    back, tick_ns = read_events(path)
    assert tick_ns == TICK_NS
    assert np.array_equal(back.x, events.x)
    assert np.array_equal(back.y, events.y)
    assert np.array_equal(back.t_ns, events.t_ns)
    assert np.array_equal(back.tot_ns, events.tot_ns)


def test_events_round_trip_empty(tmp_path):
    path = tmp_path / "empty.events"
    write_events(path, RawEvents.empty())
    back, _ = read_events(path)
    assert len(back) == 0


def test_write_events_rejects_unencodable(tmp_path):
    bad_t = RawEvents(np.zeros(1, np.uint16), np.zeros(1, np.uint16),
                      np.array([-5.0]), np.array([100.0]))
    with pytest.raises(ValueError):
        write_events(tmp_path / "x.events", bad_t)
    bad_tot = RawEvents(np.zeros(1, np.uint16), np.zeros(1, np.uint16),
                        np.array([0.0]), np.array([1e9]))
    with pytest.raises(ValueError):
        write_events(tmp_path / "y.events", bad_tot)


def test_decode_errors_name_byte_offsets(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "good.events"
    write_events(path, _events_on_grid(rng, 10))
    blob = path.read_bytes()

    def expect(data, offset):
        p = tmp_path / "bad.events"
        p.write_bytes(data)
        with pytest.raises(DecodeError) as err:
            read_events(p)
        assert err.value.offset == offset

    expect(blob[:10], 10)                                # truncated header
    expect(b"XXXX" + blob[4:], 0)                        # bad magic
    expect(blob[:4] + b"\x63\x00" + blob[6:], 4)         # unknown version
    expect(blob[:6] + b"\x00\x00\x00\x00" + blob[10:], 6)  # zero tick
    expect(blob[:-3], HEADER_BYTES + 9 * EVENT_BYTES)    # partial record


def test_sync_round_trip(tmp_path):
    t = quantize_ns(np.arange(0, 10) * 20_000.0)
    pol = np.array([POLARITY_RISING, POLARITY_FALLING] * 5, np.uint8)
    path = tmp_path / "a.sync"
    write_sync(path, SyncEdges(t, pol))
    back = read_sync(path)
    assert np.array_equal(back.t_ns, t)
    assert np.array_equal(back.polarity, pol)

    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DecodeError) as err:
        read_sync(path)
    assert err.value.offset == 9 * SYNC_BYTES


def _skewed_edges(rng, skew_ppm=4.0, duration_s=1.0, freq_hz=25e3,
                  jitter_ns=2.0):
    c_tpx = 1.0 + skew_ppm * 1e-6
    k = np.arange(int(duration_s * freq_hz) + 1)
    rising = k / freq_hz * 1e9 / c_tpx
    falling = (k + 0.5) / freq_hz * 1e9 / c_tpx
    t = np.sort(np.concatenate([rising, falling]))
    pol = np.empty(len(t), np.uint8)
    pol[::2] = POLARITY_RISING
    pol[1::2] = POLARITY_FALLING
    t = quantize_ns(np.maximum(t + rng.normal(0, jitter_ns, len(t)), 0.0))
    order = np.argsort(t, kind="stable")
    return SyncEdges(t[order], pol[order]), c_tpx


def test_timebase_recovers_injected_skew():
    rng = np.random.default_rng(3)
    edges, c_true = _skewed_edges(rng)
    tb = estimate_timebase(edges, 25e3)
    skew_est = (tb.c_tpx - 1.0) * 1e6
    assert abs(skew_est - 4.0) < 0.04          # 1% of the injected 4 ppm
    assert tb.polarity_used == POLARITY_RISING
    assert tb.n_edges_used == 25001
    assert tb.residual_rms_ns < 10.0


def test_timebase_uses_majority_polarity():
    rng = np.random.default_rng(4)
    freq = 25e3
    k = np.arange(2000)
    rising = k / freq * 1e9
    # a handful of falling edges at junk times must not perturb the fit
    falling = rng.uniform(0, rising[-1], 40)
    t = np.concatenate([rising, falling])
    pol = np.concatenate([np.full(len(rising), POLARITY_RISING, np.uint8),
                          np.full(len(falling), POLARITY_FALLING, np.uint8)])
    order = np.argsort(t, kind="stable")
    tb = estimate_timebase(SyncEdges(t[order], pol[order]), freq)
    assert tb.polarity_used == POLARITY_RISING
    assert abs(tb.c_tpx - 1.0) < 1e-9


def test_timebase_input_validation():
    edges = SyncEdges(np.array([0.0, 40e3, 20e3]),
                      np.array([1, 1, 1], np.uint8))
    with pytest.raises(ValueError):
        estimate_timebase(edges, 25e3)
    one = SyncEdges(np.array([0.0]), np.array([1], np.uint8))
    with pytest.raises(InsufficientDataError):
        estimate_timebase(one, 25e3)
    two = SyncEdges(np.array([0.0, 40e3]), np.array([1, 1], np.uint8))
    with pytest.raises(ValueError):
        estimate_timebase(two, -1.0)


def test_timebase_model_rejects_implausible_skew():
    with pytest.raises(ValueError):
        TimebaseModel(c_tpx=1.002, residual_rms_ns=0.0, n_edges_used=10,
                      polarity_used=1, period_cam_ns=40e3)


def test_raw_events_validation_and_take():
    with pytest.raises(ValueError):
        RawEvents(np.zeros(2, np.uint16), np.zeros(3, np.uint16),
                  np.zeros(2), np.zeros(2))
    rng = np.random.default_rng(5)
    events = _events_on_grid(rng, 20)
    sub = events.take(np.array([3, 1]))
    assert len(sub) == 2
    assert sub.x[0] == events.x[3] and sub.t_ns[1] == events.t_ns[1]
    both = RawEvents.concatenate([sub, sub])
    assert len(both) == 4
