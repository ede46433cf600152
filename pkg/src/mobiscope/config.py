"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .synth import ScenarioConfig
from .timeutil import DEFAULT_TZ, month_range, parse_clock, parse_month

PATH_KEYS = ("pings", "pois", "zones", "regions", "stations", "workdir")
SCENARIO_PREFIX = "scenario."


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Everything a pipeline run depends on.

    Thresholds default to the values used throughout the package: 100 m stay
    radius, 5 min to 24 h stay duration, 50 pings per month and 10 active
    days per year, 5 night pings for a home, 50 m POI radius and 500 m
    station buffers.
    """

    pings: str = "pings.csv.gz"
    pois: str = "pois.csv"
    zones: str = "zones.geojson"
    regions: str = ""
    stations: str = "stations.csv"
    workdir: str = "work"
    study_start: str = "2018-07"
    study_end: str = "2019-06"
    opening_month: str = "2018-12"
    base_period: str = "2018-11"
    timezone: str = DEFAULT_TZ
    origin_lat: float = 4.60
    origin_lon: float = -74.10
    side_m: float = 100.0
    stay_radius_m: float = 100.0
    stay_min_duration_s: int = 300
    stay_max_duration_s: int = 86400
    min_pings_per_month: float = 50.0
    min_active_days: int = 10
    home_radius_m: float = 100.0
    min_night_pings: int = 5
    night_start: str = "22:30"
    night_end: str = "05:30"
    poi_radius_m: float = 50.0
    buffer_m: float = 500.0
    high_income_strata: str = "4,5,6"
    exposure_weighting: str = "visits"
    outcomes: str = "trips_total"
    se_mode: str = "cluster"
    weighted: bool = False
    method: str = "demean"
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    base_dir: str = "."

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    @property
    def months(self) -> list[str]:
        return month_range(self.study_start, self.study_end)

    @property
    def outcome_list(self) -> list[str]:
        return [o.strip() for o in self.outcomes.split(",") if o.strip()]

    @property
    def strata(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.high_income_strata.split(",") if s.strip())

    def path(self, key: str) -> Path:
        value = getattr(self, key)
        if key == "workdir" and os.environ.get("MOBISCOPE_WORKDIR"):
            value = os.environ["MOBISCOPE_WORKDIR"]
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        try:
            self.study_start = parse_month(self.study_start)
            self.study_end = parse_month(self.study_end)
            self.opening_month = parse_month(self.opening_month)
            self.base_period = parse_month(self.base_period)
            months = self.months
            parse_clock(self.night_start)
            parse_clock(self.night_end)
            self.strata
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(months) < 2:
            raise ConfigError("study window must span at least two months")
        for key in ("opening_month", "base_period"):
            if getattr(self, key) not in months:
                raise ConfigError(f"{key} {getattr(self, key)} lies outside the study window")
        positive = ("side_m", "stay_radius_m", "stay_min_duration_s", "stay_max_duration_s",
                    "min_pings_per_month", "min_active_days", "home_radius_m", "min_night_pings",
                    "poi_radius_m", "buffer_m")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if self.stay_max_duration_s < self.stay_min_duration_s:
            raise ConfigError("stay_max_duration_s must be >= stay_min_duration_s")
        if self.se_mode not in ("cluster", "hc1"):
            raise ConfigError(f"se_mode must be cluster or hc1, not {self.se_mode!r}")
        if self.method not in ("demean", "dummy"):
            raise ConfigError(f"method must be demean or dummy, not {self.method!r}")
        if self.exposure_weighting not in ("visits", "unique"):
            raise ConfigError("exposure_weighting must be visits or unique")
        if not self.outcome_list:
            raise ConfigError("no outcomes configured")
        from .panel import outcome_column
        for o in self.outcome_list:
            try:
                outcome_column(o)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def settings(self) -> dict:
        """Non-path settings, the part of the config that shapes results."""
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
             if f.name not in PATH_KEYS + ("scenario", "base_dir")}
        d["scenario"] = self.scenario.to_dict()
        return d

    def digest(self, keys=None) -> str:
        s = self.settings()
        if keys is not None:
            s = {k: s[k] for k in keys}
        blob = json.dumps(s, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(raw: str, target):
    if isinstance(target, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(target, int):
        return int(raw)
    if isinstance(target, float):
        return float(raw)
    return raw


def parse_config_text(text: str, base_dir=".") -> PipelineConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys prefixed ``scenario.`` set :class:`ScenarioConfig` fields used by
    the ``simulate`` stage.
    """
    known = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    scen_fields = {f.name: f for f in dataclasses.fields(ScenarioConfig)}
    values, scen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith(SCENARIO_PREFIX):
                name = key[len(SCENARIO_PREFIX):]
                if name not in scen_fields:
                    raise ConfigError(f"line {lineno}: unknown scenario key {name!r}")
                default = scen_fields[name].default
                scen[name] = _coerce(raw, default)
            elif key in known and key not in ("scenario", "base_dir"):
                default = known[key].default
                values[key] = _coerce(raw, default)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: {exc}") from exc
    try:
        scenario = ScenarioConfig(**scen)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    return PipelineConfig(**values, scenario=scenario, base_dir=str(base_dir))


def load_config(path) -> PipelineConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text, base_dir=p.parent)


def format_config(cfg: PipelineConfig) -> str:
    """Inverse of :func:`parse_config_text` (paths as given, not resolved)."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in ("scenario", "base_dir"):
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    for k, v in cfg.scenario.to_dict().items():
        lines.append(f"{SCENARIO_PREFIX}{k} = {v}")
    return "\n".join(lines) + "\n"
