"""Scenario configuration: a TOML file describing trap, optics, detector,
detection window and run sizes, turned into simulator objects.

Sections map one-to-one onto the dataclasses they configure; unknown keys
are rejected so typos fail loudly instead of silently running defaults.
"""

import dataclasses
import hashlib
import math

try:
    import tomllib
except ModuleNotFoundError:        # python < 3.11
    import tomli as tomllib

from .discriminate import DetectionParams
from .errors import ConfigError
from .frame import RotationFrame
from .sim import IlluminationModel, IntensifierModel, TrapParams


@dataclasses.dataclass
class RunParams:
    """Run-size and protocol knobs shared by the CLI subcommands."""

    seed: int = 0
    n_pairs: int = 200
    ref_exposure_s: float = 0.020
    det_exposure_s: float = 0.010
    dark_fraction: float = 0.5
    sync_jitter_ns: float = 2.0
    min_recall_fraction: float = 0.5
    find_center: bool = False
    # calibration runs
    n_rate_pairs: int = 30
    n_lifetime_pairs: int = 30
    lifetime_exposure_s: float = 0.150
    rate_poly_degree: int = 3
    lifetime_radius_bins: int = 5
    timewalk_shots: int = 8
    timewalk_exposure_s: float = 0.004
    # sweep axes
    sweep_pairs: int = 60
    sweep_times_ms: tuple = (2.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    sweep_roi_px: tuple = (2.0, 4.0, 6.0)
    sweep_nbins: tuple = (1, 5, 10, 25)
    sweep_radius_bins: int = 5
    # rabi scan
    rabi_freq_hz: float = 8800.0
    rabi_durations_us: tuple = tuple(round(i * 170.0 / 11, 1) for i in range(12))
    rabi_pairs_per_point: int = 20
    # throughput bench
    bench_events: int = 2_000_000
    bench_rate_hz: float = 5.5e6


_SECTION_TYPES = {
    "trap": TrapParams,
    "illumination": IlluminationModel,
    "intensifier": IntensifierModel,
    "detection": DetectionParams,
    "run": RunParams,
}

# [frame] is flat keys, not a dataclass
_FRAME_KEYS = {"clock_skew_ppm", "center_px", "crystal_seed"}


def _coerce(value):
    return tuple(value) if isinstance(value, list) else value


def _build_section(cls, table, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}")


@dataclasses.dataclass
class ScenarioConfig:
    trap: TrapParams
    illumination: IlluminationModel
    intensifier: IntensifierModel
    detection: DetectionParams
    run: RunParams
    clock_skew_ppm: float = 0.0
    center_px: tuple = (128.0, 128.0)
    crystal_seed: int = 0
    sha: str = ""
    source_path: str = ""

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read scenario file: {exc}")
        try:
            doc = tomllib.loads(raw.decode("utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}")
        return cls.from_dict(doc, sha=hashlib.sha256(raw).hexdigest()[:12],
                             source_path=str(path))

    @classmethod
    def from_dict(cls, doc, sha="", source_path=""):
        unknown = sorted(set(doc) - set(_SECTION_TYPES) - {"frame"})
        if unknown:
            raise ConfigError(f"unknown sections: {', '.join(unknown)}")
        parts = {}
        for section, typ in _SECTION_TYPES.items():
            parts[section] = _build_section(typ, doc.get(section, {}), section)
        frame_tab = doc.get("frame", {})
        bad = sorted(set(frame_tab) - _FRAME_KEYS)
        if bad:
            raise ConfigError(f"[frame] unknown keys: {', '.join(bad)}")
        return cls(trap=parts["trap"], illumination=parts["illumination"],
                   intensifier=parts["intensifier"],
                   detection=parts["detection"], run=parts["run"],
                   clock_skew_ppm=float(frame_tab.get("clock_skew_ppm", 0.0)),
                   center_px=tuple(frame_tab.get("center_px", (128.0, 128.0))),
                   crystal_seed=int(frame_tab.get("crystal_seed", 0)),
                   sha=sha, source_path=source_path)

    @property
    def c_tpx_true(self):
        return 1.0 + self.clock_skew_ppm * 1e-6

    def base_frame(self):
        """Ground-truth rotation frame template (t0 assigned per shot)."""
        return RotationFrame(
            omega_r=2.0 * math.pi * self.trap.rotation_freq_hz,
            c_tpx=self.c_tpx_true, t0_ns=0.0, center_px=self.center_px)
