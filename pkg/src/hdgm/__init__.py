"""Heteroskedastic hidden dynamic geostatistical model: EM fitting, kriging and scenarios."""

from .diagnostics import CvReport, losocv, st_variogram, station_acf, studentized_residuals
from .emfit import EMOptions, FitReport, FitResult, ModelParams, em_fit
from .errors import HDGMError, InputError, LikelihoodDecreaseError, NumericalError, SchemaError
from .geo import CorrelationKernel, SiteSet, distance_matrix, geodetic_distance
from .io import load_config, load_fit, read_grid_csv, read_panel_csv, save_fit
from .panel import ModelSpec, Moments, ObservationPanel
from .predict import GridPrediction, PredictionGrid, krige_latent, predict_response
from .scenario import ScenarioSpec, aggregate, daily_delta, run_scenario
from .sim import SimSpec, simulate
from .statespace import StateSpaceInputs, kalman_filter, kalman_smooth

__version__ = "0.1.0"

__all__ = [
    "CorrelationKernel", "CvReport", "EMOptions", "FitReport", "FitResult", "GridPrediction",
    "HDGMError", "InputError", "LikelihoodDecreaseError", "ModelParams", "ModelSpec", "Moments",
    "NumericalError", "ObservationPanel", "PredictionGrid", "ScenarioSpec", "SchemaError", "SimSpec",
    "SiteSet", "StateSpaceInputs", "aggregate", "daily_delta", "distance_matrix", "em_fit",
    "geodetic_distance", "kalman_filter", "kalman_smooth", "krige_latent", "load_config", "load_fit",
    "losocv", "predict_response", "read_grid_csv", "read_panel_csv", "run_scenario", "save_fit",
    "simulate", "st_variogram", "station_acf", "studentized_residuals",
]
