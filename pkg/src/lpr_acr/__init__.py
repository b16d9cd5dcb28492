"""Lane-based arrival curve reconstruction from license-plate-recognition data."""

from .bacl import BaclModel, Hyperparameters, fit_lane_model, predict
from .curves import (
    CumulativeCurve,
    LprRecord,
    MatchedVehiclePair,
    SignalTiming,
    SiteLayout,
    build_departure_curve,
    curve_value,
    link_arrival_curve,
    match_plates,
)
from .features import FeatureSpec, extract_training_samples
from .metrics import crps_gaussian, crps_numeric, interval_coverage, rmse
from .reconstruct import ReconstructedCurve, RealtimeState, historical_acr, realtime_acr, vehicle_count
from .simulator import default_config, degrade_to_matching_rate, simulate

__version__ = "0.1.0"
