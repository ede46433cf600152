"""mobiscope: from smartphone pings to a difference-in-differences event study."""

from .config import ConfigError, PipelineConfig, load_config
from .estimator import (ConvergenceError, EstimationError, EventStudyFit, EventStudyRegressor,
                        SingularDesignError, fit_event_study, pooled_att, pretrend_test)
from .geo import (GeoDomainError, GeoPoint, GridSpec, HexCell, HexGrid, Region, Station, StratumZone,
                  hex_assign, haversine, in_buffer, stratum_lookup)
from .ingest import DeviceFilter, IngestError, RejectReport, filter_devices, parse_pings
from .panel import build_device_records, build_panel
from .pipeline import MissingArtifactError, Pipeline
from .segregation import VisitorMixProfiler, exposure_by_device_month, high_income_share, poi_profiles, shannon_entropy
from .stays import HomeLocator, PoiMatcher, StayDetector, detect_stays, infer_homes, match_poi
from .synth import InfeasibleScenarioError, ScenarioConfig, generate, perturb

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "PipelineConfig", "load_config",
    "ConvergenceError", "EstimationError", "EventStudyFit", "EventStudyRegressor", "SingularDesignError",
    "fit_event_study", "pooled_att", "pretrend_test",
    "GeoDomainError", "GeoPoint", "GridSpec", "HexCell", "HexGrid", "Region", "Station", "StratumZone",
    "hex_assign", "haversine", "in_buffer", "stratum_lookup",
    "DeviceFilter", "IngestError", "RejectReport", "filter_devices", "parse_pings",
    "build_device_records", "build_panel",
    "MissingArtifactError", "Pipeline",
    "VisitorMixProfiler", "exposure_by_device_month", "high_income_share", "poi_profiles", "shannon_entropy",
    "HomeLocator", "PoiMatcher", "StayDetector", "detect_stays", "infer_homes", "match_poi",
    "InfeasibleScenarioError", "ScenarioConfig", "generate", "perturb",
]
