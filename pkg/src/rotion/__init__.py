"""Photon-event processing for rotating trapped-ion crystals.

Synthesizes raw timestamped event streams from rotating 2D ion crystals,
reconstructs per-photon positions in the crystal rest frame (clustering,
time-walk correction, derotation, center search), localizes ions, and
classifies per-ion spin states with a time-binned maximum-likelihood test.
"""

from .cluster import (TimewalkTable, UVHits, apply_timewalk,
                      calibrate_timewalk, dbscan_cluster, reconstruct_uv)
from .config import RunParams, ScenarioConfig
from .discriminate import (CalibrationModel, DetectionParams, FidelityReport,
                           StateCall, calibrate_lifetimes, calibrate_rates,
                           classify, extract_roi_counts, flip_prior_weights,
                           measure_fidelity, rabi_analysis,
                           run_detection_sequence)
from .errors import (CenterSearchError, ConfigError, ConvergenceError,
                     DataError, DecodeError, IllConditionedFitError,
                     InsufficientDataError, NumericalError, RotionError,
                     ShotRejectionError)
from .events import (RawEvents, SyncEdges, TimebaseModel, estimate_timebase,
                     read_events, read_sync, write_events, write_sync)
from .frame import (BinnedImage, CenterResult, RestPoints, RotationFrame,
                    bin_image, derotate, find_center, rerotate,
                    sharpness_cost)
from .locate import (IonSite, MatchReport, detect_ions, match_sites,
                     refine_gaussian)
from .pipeline import (ScenarioBundle, build_calibration, prepare_bundle,
                       run_bench, run_fidelity, run_rabi, run_sweep)
from .sim import (CrystalState, IlluminationModel, IntensifierModel,
                  PairResult, ShotTruth, TrapParams, expected_ion_photons,
                  simulate_experiment_pair, simulate_shot, solve_equilibrium)

__version__ = "0.1.0"

__all__ = [
    "BinnedImage", "CalibrationModel", "CenterResult", "CenterSearchError",
    "ConfigError", "ConvergenceError", "CrystalState", "DataError",
    "DecodeError", "DetectionParams", "FidelityReport",
    "IllConditionedFitError", "IlluminationModel", "InsufficientDataError",
    "IntensifierModel", "IonSite", "MatchReport", "NumericalError",
    "PairResult", "RawEvents", "RestPoints", "RotationFrame", "RotionError",
    "RunParams", "ScenarioBundle", "ScenarioConfig", "ShotRejectionError",
    "ShotTruth", "StateCall", "SyncEdges", "TimebaseModel", "TimewalkTable",
    "TrapParams", "UVHits", "apply_timewalk", "bin_image",
    "build_calibration", "calibrate_lifetimes", "calibrate_rates",
    "calibrate_timewalk", "classify", "dbscan_cluster", "derotate",
    "detect_ions", "estimate_timebase", "expected_ion_photons",
    "extract_roi_counts", "find_center", "flip_prior_weights",
    "match_sites", "measure_fidelity", "prepare_bundle", "rabi_analysis",
    "read_events", "read_sync", "reconstruct_uv", "refine_gaussian",
    "rerotate", "run_bench", "run_detection_sequence", "run_fidelity",
    "run_rabi", "run_sweep", "sharpness_cost", "simulate_experiment_pair",
    "simulate_shot", "solve_equilibrium", "write_events", "write_sync",
]
