"""End-to-end command line tests on a miniature scenario.

Each subcommand runs in-process through main(argv) against a small 8-ion
configuration so the whole file stays fast. Exit codes are part of the
contract: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

import csv
import hashlib
import json

import numpy as np
import pytest

from rotion.cli import main
from rotion.cluster import TimewalkTable
from rotion.discriminate import CalibrationModel
from rotion.events import read_events, read_sync

from conftest import micro_doc

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def _write_toml(path, doc):
    lines = []
    for section, table in doc.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in table.items())
        lines.append("")
    path.write_text("\n".join(lines))


def _read_csv(path):
    comments, rows = [], []
    with open(path) as fh:
        pos = fh.tell()
        line = fh.readline()
        while line.startswith("#"):
            comments.append(line.rstrip("\n"))
            pos = fh.tell()
            line = fh.readline()
        fh.seek(pos)
        rows = list(csv.DictReader(fh))
    return comments, rows


@pytest.fixture(scope="session")
def ws(tmp_path_factory):
    """Workspace with the micro scenario TOML and a finished calibrate run."""
    root = tmp_path_factory.mktemp("cli")
    doc = micro_doc()
    doc["run"].update({
        "n_pairs": 2, "sweep_pairs": 2, "sweep_times_ms": [2.0, 4.0],
        "sweep_roi_px": [3.0, 4.0], "sweep_nbins": [1, 2],
        "sweep_radius_bins": 2, "rabi_freq_hz": 8800.0,
        "rabi_durations_us": [0.0, 22.0, 44.0, 66.0, 88.0, 110.0, 132.0,
                              154.0],
        "rabi_pairs_per_point": 3, "bench_events": 150_000,
    })
    cfg = root / "micro.toml"
    _write_toml(cfg, doc)
    sha = hashlib.sha256(cfg.read_bytes()).hexdigest()[:12]
    cal_dir = root / "cal"
    assert main(["calibrate", "--config", str(cfg),
                 "--out", str(cal_dir)]) == 0
    return {"root": root, "cfg": cfg, "sha": sha, "cal": cal_dir}


def test_simulate_writes_events_sync_and_truth(ws, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(ws["cfg"]), "--out", str(out),
                 "--pairs", "1"]) == 0
    for suffix in ("_ref.events", "_ref.sync", "_det.events", "_det.sync",
                   "_truth.json"):
        assert (out / f"pair0000{suffix}").exists()
    events, tick_ns = read_events(out / "pair0000_ref.events")
    assert len(events) > 1000
    assert tick_ns == 1.5625
    sync = read_sync(out / "pair0000_det.sync")
    assert len(sync) > 0 and set(np.unique(sync.polarity)) <= {0, 1}
    truth = json.loads((out / "pair0000_truth.json").read_text())
    assert truth["config_sha"] == ws["sha"]
    assert truth["c_tpx"] == 1.0 + 4e-6
    assert len(truth["rest_sites_px"]) == 8
    assert len(truth["det_initial_bright"]) == 8
    assert truth["det_exposure_s"] == 0.005


def test_simulate_is_deterministic(ws, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["simulate", "--config", str(ws["cfg"]),
                     "--out", str(out), "--pairs", "1"]) == 0
        outs.append(out)
    for suffix in ("_ref.events", "_det.events", "_ref.sync", "_det.sync"):
        a = (outs[0] / f"pair0000{suffix}").read_bytes()
        b = (outs[1] / f"pair0000{suffix}").read_bytes()
        assert a == b


def test_calibrate_artifacts_load(ws):
    model = CalibrationModel.load(ws["cal"] / "calibration.json")
    lam_b, lam_d, tau_b, tau_d, clamped = model.rates_for(
        10.0, __import__("rotion.discriminate", fromlist=["DetectionParams"])
        .DetectionParams(1e-3, 5, 4.0))
    assert lam_b > lam_d > 0
    assert tau_b > 0 and tau_d > 0
    table = TimewalkTable.load(ws["cal"] / "timewalk.txt")
    assert table.correction_for(np.array([100.0])).shape == (1,)


def test_detect_writes_states_csv_and_image(ws, tmp_path):
    out = tmp_path / "det"
    assert main(["detect", "--config", str(ws["cfg"]), "--out", str(out),
                 "--calibration", str(ws["cal"] / "calibration.json"),
                 "--pairs", "2"]) == 0
    comments, rows = _read_csv(out / "states.csv")
    assert comments[0] == f"# config {ws['sha']}"
    assert any("rejected_shots" in c for c in comments)
    assert rows and set(rows[0]) == {"shot", "site", "x_px", "y_px",
                                     "radius_px", "state", "log_odds",
                                     "radius_clamped", "truth"}
    assert {r["state"] for r in rows} <= {"bright", "dark"}
    judged = [r for r in rows if r["truth"]]
    assert judged, "no site matched to ground truth"
    png = out / "detect_annotated.png"
    assert png.read_bytes()[:8] == PNG_MAGIC


def test_detect_csv_format_suppresses_image(ws, tmp_path):
    out = tmp_path / "det_csv"
    assert main(["detect", "--config", str(ws["cfg"]), "--out", str(out),
                 "--calibration", str(ws["cal"] / "calibration.json"),
                 "--pairs", "1", "--format", "csv"]) == 0
    assert (out / "states.csv").exists()
    assert not list(out.glob("*.png")) and not list(out.glob("*.pgm"))


def test_sweep_writes_csv_and_charts(ws, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(ws["cfg"]),
                 "--out", str(out)]) == 0
    comments, rows = _read_csv(out / "sweep.csv")
    assert comments[0] == f"# config {ws['sha']}"
    assert any(c == "# pairs 2" for c in comments)
    axes = {r["axis"] for r in rows}
    assert {"time", "bins", "radius"} <= axes
    f_vals = [float(r["value"]) for r in rows if r["metric"] == "f_avg"]
    assert f_vals and all(0.0 <= v <= 1.0 for v in f_vals)
    times = {float(r["time_ms"]) for r in rows
             if r["axis"] == "time" and r["time_ms"]}
    assert times == {2.0, 4.0}
    for name in ("sweep_time", "sweep_bins", "sweep_radius"):
        assert (out / f"{name}.png").read_bytes()[:8] == PNG_MAGIC


def test_rabi_writes_scan_and_fit(ws, tmp_path):
    out = tmp_path / "rabi"
    assert main(["rabi", "--config", str(ws["cfg"]), "--out", str(out),
                 "--format", "csv"]) == 0
    comments, rows = _read_csv(out / "rabi.csv")
    assert comments[0] == f"# config {ws['sha']}"
    assert any("fit freq_hz" in c for c in comments)
    assert len(rows) == 8
    assert [float(r["duration_us"]) for r in rows] == pytest.approx(
        [0.0, 22.0, 44.0, 66.0, 88.0, 110.0, 132.0, 154.0])
    assert all(0.0 <= float(r["p_up"]) <= 1.0 for r in rows)


def test_bench_writes_report(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--out", str(out),
                 "--bench-events", "150000"]) == 0
    comments, rows = _read_csv(out / "bench.csv")
    assert comments[0] == "# config none"
    assert len(rows) == 1
    # synthetic stream size is Poisson-composed, so only approximately n
    assert int(rows[0]["n_events"]) == pytest.approx(150_000, rel=0.05)
    assert float(rows[0]["events_per_s"]) > 1e5
    assert int(rows[0]["n_uv"]) > 0


def test_bench_on_recorded_events_file(ws, tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(ws["cfg"]), "--out", str(sim),
                 "--pairs", "1"]) == 0
    out = tmp_path / "bench"
    assert main(["bench", "--events", str(sim / "pair0000_ref.events"),
                 "--out", str(out)]) == 0
    events, _ = read_events(sim / "pair0000_ref.events")
    comments, rows = _read_csv(out / "bench.csv")
    assert int(rows[0]["n_events"]) == len(events)
    assert 0 < int(rows[0]["n_uv"]) <= len(events)


def test_missing_config_exits_2(tmp_path):
    rc = main(["detect", "--config", str(tmp_path / "nope.toml"),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert main(["calibrate", "--out", str(tmp_path / "o2")]) == 2


def test_unknown_key_exits_2(tmp_path):
    doc = micro_doc()
    doc["trap"]["n_ion"] = 12        # typo'd key
    bad = tmp_path / "bad.toml"
    _write_toml(bad, doc)
    rc = main(["simulate", "--config", str(bad),
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_corrupt_events_file_exits_3(tmp_path):
    bad = tmp_path / "bad.events"
    bad.write_bytes(b"NOTAMAGIC" + b"\x00" * 32)
    rc = main(["bench", "--events", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 3


def test_swapped_rates_calibration_exits_4(tmp_path):
    doc = micro_doc()
    doc["illumination"]["rate_bright_coeffs"] = [600.0]
    doc["illumination"]["rate_dark_coeffs"] = [30e3]
    bad = tmp_path / "swapped.toml"
    _write_toml(bad, doc)
    rc = main(["calibrate", "--config", str(bad),
               "--out", str(tmp_path / "o")])
    assert rc == 4


def test_plot_helpers_produce_rgb_and_png(tmp_path):
    from rotion import plot
    chart = plot.line_chart([("a", [0.0, 1.0, 2.0], [0.1, 0.5, 0.2])],
                            title="t", xlabel="x", ylabel="y")
    heat = plot.heatmap(np.linspace(0, 1, 24).reshape(4, 6), title="h")
    annot = plot.annotate_image(np.ones((32, 32)),
                                [(10.0, 12.0, (255, 0, 0))])
    for img in (chart, heat, annot):
        assert img.ndim == 3 and img.shape[2] == 3 and img.dtype == np.uint8
    path = tmp_path / "chart.png"
    plot.save_png(path, chart)
    assert path.read_bytes()[:8] == PNG_MAGIC
