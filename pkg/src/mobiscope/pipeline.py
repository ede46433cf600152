"""Stage runner: each stage reads its predecessors' artifacts from the
working directory, writes its own and records digests in ``manifest.json``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import geo, ingest, panel, segregation, stays, synth
from ._io import file_digest, read_csv, write_csv, write_json
from .config import ConfigError, PipelineConfig
from .estimator import EventStudyRegressor, pretrend_test

logger = logging.getLogger(__name__)

STAGES = ("ingest", "stays", "homes", "profiles", "panel", "fit")
MANIFEST = "manifest.json"
TIMINGS = "timings.json"

STAY_OUTPUT_COLUMNS = ["device_id", "start", "end", "lat", "lon", "ping_count", "hex_id", "stratum",
                       "poi_id", "region_id"]
HOME_OUTPUT_COLUMNS = ["device_id", "month", "lat", "lon", "night_pings", "hex_id"]
TRIP_OUTPUT_COLUMNS = ["device_id", "month"] + STAY_OUTPUT_COLUMNS[1:]


class MissingArtifactError(RuntimeError):
    """An upstream artifact a stage needs is absent from the workdir."""


# --------------------------------------------------------------------------
# helpers


def outcome_slug(outcome: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", outcome).strip("_")


def make_grid(cfg: PipelineConfig) -> geo.HexGrid:
    return geo.HexGrid(geo.GridSpec(cfg.origin_lat, cfg.origin_lon, cfg.side_m))


# --------------------------------------------------------------------------
# stages


@dataclass(frozen=True)
class Stage:
    name: str
    inputs: tuple        # config path keys
    upstream: tuple      # workdir artifacts produced earlier
    keys: tuple          # config settings the stage depends on
    func: object


_STAGE_FUNCS: dict = {}


def _stage(name, inputs=(), upstream=(), keys=()):
    def deco(func):
        _STAGE_FUNCS[name] = Stage(name, tuple(inputs), tuple(upstream), tuple(keys), func)
        return func
    return deco


_WINDOW = ("study_start", "study_end", "timezone")
_GRID = ("origin_lat", "origin_lon", "side_m")


@_stage("ingest", inputs=("pings",), keys=_WINDOW + ("min_pings_per_month", "min_active_days"))
def run_ingest(cfg: PipelineConfig, wd: Path, threads: int) -> dict:
    pings, report = ingest.parse_pings(cfg.path("pings"), cfg.months, cfg.timezone, threads=threads)
    filt = ingest.DeviceFilter(cfg.min_pings_per_month, cfg.min_active_days, cfg.months,
                               cfg.timezone).fit(pings)
    clean = filt.transform(pings)
    ingest.write_pings(clean, wd / "pings_clean.csv.gz")
    q = filt.quality_
    rep = report.to_dict()
    rep["devices_seen"] = int(len(q))
    rep["devices_kept"] = int(q["passed"].sum())
    write_json(rep, wd / "reject_report.json")
    return {"pings_clean.csv.gz": len(clean), "device_quality.csv": write_csv(q, wd / "device_quality.csv"),
            "reject_report.json": None}


def _load_zones(cfg):
    return geo.read_stratum_zones(cfg.path("zones"))


def _load_regions(cfg):
    return geo.read_regions(cfg.path("regions")) if cfg.regions else []


def _load_stations(cfg):
    return geo.read_stations(cfg.path("stations"), default_buffer_m=cfg.buffer_m)


def _read_clean_pings(wd: Path, threads: int) -> pd.DataFrame:
    pings, _ = ingest.parse_pings(wd / "pings_clean.csv.gz", threads=threads)
    return pings


def detect_and_annotate(pings, cfg, grid, zones, regions, matcher, threads=1) -> pd.DataFrame:
    det = stays.StayDetector(cfg.stay_radius_m, cfg.stay_min_duration_s, cfg.stay_max_duration_s,
                             n_jobs=threads)
    st = det.fit().transform(pings)
    st = stays.annotate_stays(st, grid, zones, regions)
    st["poi_id"] = matcher.predict(st) if matcher is not None else ""
    return st[STAY_OUTPUT_COLUMNS]


@_stage("stays", inputs=("pois", "zones", "regions"), upstream=("pings_clean.csv.gz",),
        keys=_GRID + ("stay_radius_m", "stay_min_duration_s", "stay_max_duration_s", "poi_radius_m"))
def run_stays(cfg, wd, threads):
    pings = _read_clean_pings(wd, threads)
    matcher = stays.PoiMatcher(cfg.poi_radius_m).fit(stays.read_pois(cfg.path("pois")))
    st = detect_and_annotate(pings, cfg, make_grid(cfg), _load_zones(cfg), _load_regions(cfg), matcher,
                             threads)
    return {"stays.csv": write_csv(st, wd / "stays.csv")}


def locate_homes(pings, cfg, grid) -> pd.DataFrame:
    loc = stays.HomeLocator(cfg.home_radius_m, cfg.min_night_pings, cfg.night_start, cfg.night_end,
                            cfg.timezone)
    homes = loc.fit().transform(pings)
    # nights anchored before the window start have no place in the panel
    homes = homes[homes["month"].isin(cfg.months)].reset_index(drop=True)
    homes["hex_id"] = grid.cell_ids(homes["lat"].to_numpy(), homes["lon"].to_numpy()) if len(homes) else ""
    return homes[HOME_OUTPUT_COLUMNS]


def outside_home(st, homes, cfg) -> pd.DataFrame:
    trips = stays.trips_outside_home(st, homes, cfg.home_radius_m, cfg.timezone)
    return trips[TRIP_OUTPUT_COLUMNS]


@_stage("homes", upstream=("pings_clean.csv.gz", "stays.csv"),
        keys=_WINDOW + _GRID + ("home_radius_m", "min_night_pings", "night_start", "night_end"))
def run_homes(cfg, wd, threads):
    pings = _read_clean_pings(wd, threads)
    homes = locate_homes(pings, cfg, make_grid(cfg))
    trips = outside_home(read_csv(wd / "stays.csv"), homes, cfg)
    return {"homes.csv": write_csv(homes, wd / "homes.csv"),
            "trips.csv": write_csv(trips, wd / "trips.csv")}


def exposure_tables(trips, homes, zones, cfg) -> tuple[pd.DataFrame, pd.DataFrame]:
    hs = homes[["device_id", "month"]].copy()
    hs["stratum"] = geo.strata_for(homes["lat"].to_numpy(), homes["lon"].to_numpy(), zones)
    visits = trips[trips["poi_id"].astype(str) != ""][["device_id", "month", "poi_id"]]
    profiles = segregation.poi_profiles(visits, hs, cfg.strata)
    exposure = segregation.exposure_by_device_month(visits, profiles, cfg.exposure_weighting)
    return profiles, exposure


@_stage("profiles", inputs=("zones",), upstream=("trips.csv", "homes.csv"),
        keys=("high_income_strata", "exposure_weighting"))
def run_profiles(cfg, wd, threads):
    profiles, exposure = exposure_tables(read_csv(wd / "trips.csv"), read_csv(wd / "homes.csv"),
                                         _load_zones(cfg), cfg)
    return {"poi_profiles.csv": write_csv(profiles, wd / "poi_profiles.csv"),
            "exposure.csv": write_csv(exposure, wd / "exposure.csv")}


def panel_table(records, cfg) -> pd.DataFrame:
    parts = [panel.build_panel(records, o, cfg.opening_month) for o in cfg.outcome_list]
    return pd.concat(parts, ignore_index=True)


@_stage("panel", inputs=("stations", "regions"), upstream=("trips.csv", "exposure.csv", "homes.csv"),
        keys=_GRID + ("buffer_m", "opening_month", "outcomes"))
def run_panel(cfg, wd, threads):
    regions = [r.zone_id for r in _load_regions(cfg)]
    rec = panel.build_device_records(read_csv(wd / "trips.csv"), read_csv(wd / "exposure.csv"),
                                     read_csv(wd / "homes.csv"), _load_stations(cfg), make_grid(cfg),
                                     regions=regions)
    pan = panel_table(rec, cfg)
    return {"device_records.csv": write_csv(rec, wd / "device_records.csv"),
            "panel.csv": write_csv(pan, wd / "panel.csv")}


def fit_outcome(pan: pd.DataFrame, cfg: PipelineConfig):
    """Event-study fit and pretrend test of one outcome's panel rows."""
    reg = EventStudyRegressor(base_period=cfg.base_period, opening=cfg.opening_month, se_mode=cfg.se_mode,
                              weighted=cfg.weighted, method=cfg.method)
    fit = reg.fit(pan).fit_
    pre = [m for m in fit.beta.index if m < cfg.opening_month]
    pt = pretrend_test(fit) if pre else None
    return fit, pt


def fit_frame(fit_json: dict) -> pd.DataFrame:
    return pd.DataFrame(fit_json["periods"], columns=["month", "beta", "se", "ci_lo", "ci_hi"])


@_stage("fit", upstream=("panel.csv",),
        keys=("base_period", "opening_month", "outcomes", "se_mode", "weighted", "method"))
def run_fit(cfg, wd, threads):
    pan = read_csv(wd / "panel.csv")
    out = {}
    for o in cfg.outcome_list:
        sub = pan[pan["outcome"] == o]
        fit, pt = fit_outcome(sub, cfg)
        d = fit.to_dict(pt)
        d["outcome"] = o
        slug = outcome_slug(o)
        write_json(d, wd / f"fit_{slug}.json")
        out[f"fit_{slug}.json"] = None
        out[f"fit_{slug}.csv"] = write_csv(fit_frame(d), wd / f"fit_{slug}.csv")
    return out


# --------------------------------------------------------------------------
# runner


class Pipeline:
    """Run stages against a config, skipping those whose inputs are unchanged.

    Parameters
    ----------
    config : PipelineConfig
    force : bool
        Rerun stages even when the manifest says they are current.
    threads : int, optional
        Worker cap; defaults to the number of available cores.
    """

    def __init__(self, config: PipelineConfig, force: bool = False, threads: int | None = None):
        self.config = config
        self.force = force
        self.threads = max(int(threads or os.cpu_count() or 1), 1)
        self.workdir = config.path("workdir")

    # manifest ---------------------------------------------------------
    def _load(self, name) -> dict:
        p = self.workdir / name
        if p.exists():
            try:
                return json.loads(p.read_text())
            except json.JSONDecodeError:
                logger.warning("ignoring unreadable %s", p)
        return {}

    def manifest(self) -> dict:
        m = self._load(MANIFEST)
        m.setdefault("stages", {})
        return m

    def _save(self, manifest: dict, timings: dict) -> None:
        manifest["config"] = self.config.settings()
        manifest["config_digest"] = self.config.digest()
        manifest["stages"] = {k: manifest["stages"][k] for k in sorted(manifest["stages"])}
        write_json(manifest, self.workdir / MANIFEST)
        write_json(timings, self.workdir / TIMINGS)

    # ------------------------------------------------------------------
    def _input_digests(self, stage: Stage) -> dict:
        cfg = self.config
        dig = {}
        for key in stage.inputs:
            if key == "regions" and not cfg.regions:
                continue
            p = cfg.path(key)
            if not p.exists():
                raise ConfigError(f"{key} file {p} does not exist")
            dig[key] = file_digest(p)
        for name in stage.upstream:
            p = self.workdir / name
            if not p.exists():
                raise MissingArtifactError(f"stage {stage.name} needs {name}; run the upstream stage first")
            dig[name] = file_digest(p)
        return dig

    def _current(self, record: dict, inputs: dict, settings: str) -> bool:
        if not record or record.get("inputs") != inputs or record.get("settings") != settings:
            return False
        for name, meta in record.get("outputs", {}).items():
            p = self.workdir / name
            if not p.exists() or file_digest(p) != meta["sha256"]:
                return False
        return True

    def run_stage(self, name: str) -> bool:
        """Run one stage; return False when it was skipped as current."""
        stage = _STAGE_FUNCS[name]
        self.workdir.mkdir(parents=True, exist_ok=True)
        inputs = self._input_digests(stage)
        settings = self.config.digest(stage.keys)
        manifest = self.manifest()
        timings = self._load(TIMINGS)
        if not self.force and self._current(manifest["stages"].get(name), inputs, settings):
            logger.info("%s: up to date, skipped", name)
            return False
        t0 = time.perf_counter()
        rows = stage.func(self.config, self.workdir, self.threads)
        elapsed = time.perf_counter() - t0
        outputs = {out: {"sha256": file_digest(self.workdir / out), "rows": n}
                   for out, n in sorted(rows.items())}
        manifest["stages"][name] = {"inputs": inputs, "settings": settings, "outputs": outputs}
        timings[name] = round(elapsed, 3)
        self._save(manifest, timings)
        logger.info("%s: done in %.1fs", name, elapsed)
        return True

    def run(self, names=STAGES) -> dict:
        return {n: self.run_stage(n) for n in names}


# --------------------------------------------------------------------------
# synthetic scenarios


def scenario_for(cfg: PipelineConfig, seed: int | None = None) -> synth.ScenarioConfig:
    """Scenario settings aligned with the pipeline's window, grid and buffers."""
    sc = cfg.scenario
    changes = dict(start_month=cfg.study_start, end_month=cfg.study_end, opening=cfg.opening_month,
                   base_period=cfg.base_period, timezone=cfg.timezone, origin_lat=cfg.origin_lat,
                   origin_lon=cfg.origin_lon, buffer_m=cfg.buffer_m, hex_side_m=cfg.side_m)
    if seed is not None:
        changes["seed"] = int(seed)
    return dataclasses.replace(sc, **changes)


def simulate(cfg: PipelineConfig, seed: int | None = None) -> dict:
    """Generate a scenario and write it to the configured input paths."""
    sc = scenario_for(cfg, seed)
    scn = synth.generate(sc)
    paths = {k: cfg.path(k) for k in ("pings", "pois", "zones", "stations")}
    if cfg.regions:
        paths["regions"] = cfg.path("regions")
    paths["truth"] = cfg.path("workdir") / "truth"
    synth.write_scenario(scn, paths)
    logger.info("simulated %d pings for %d devices (seed %d)", len(scn.pings), len(scn.devices), sc.seed)
    return {k: str(v) for k, v in paths.items()}


def analyze_scenario(scn: synth.Scenario, cfg: PipelineConfig, exposure: bool = False,
                     threads: int = 1) -> dict:
    """In-memory equivalent of the file stages on a generated scenario.

    Skips the file round trip, so it suits Monte Carlo work. POI matching and
    exposure run only when ``exposure`` is set.
    """
    grid = make_grid(cfg)
    zones, regions = scn.zones, scn.regions
    pings = scn.pings
    filt = ingest.DeviceFilter(cfg.min_pings_per_month, cfg.min_active_days, cfg.months,
                               cfg.timezone).fit(pings)
    pings = filt.transform(pings)
    matcher = stays.PoiMatcher(cfg.poi_radius_m).fit(scn.pois) if exposure else None
    st = detect_and_annotate(pings, cfg, grid, zones, regions, matcher, threads)
    homes = locate_homes(pings, cfg, grid)
    trips = outside_home(st, homes, cfg)
    exp = exposure_tables(trips, homes, zones, cfg)[1] if exposure else None
    rec = panel.build_device_records(trips, exp, homes, scn.stations, grid,
                                     regions=[r.zone_id for r in regions])
    return {"quality": filt.quality_, "stays": st, "homes": homes, "trips": trips, "exposure": exp,
            "records": rec}


def records_from_counts(devices: pd.DataFrame, truth: pd.DataFrame, stations, grid) -> pd.DataFrame:
    """Device records built from true monthly counts and true homes."""
    homes = truth[["device_id", "month"]].merge(devices[["device_id", "home_lat", "home_lon"]],
                                                on="device_id")
    homes = homes.rename(columns={"home_lat": "lat", "home_lon": "lon"})
    reps = truth["trips"].to_numpy(dtype=np.int64)
    trips = pd.DataFrame({"device_id": np.repeat(truth["device_id"].to_numpy(), reps),
                          "month": np.repeat(truth["month"].to_numpy(), reps)})
    return panel.build_device_records(trips, None, homes, stations, grid)


# --------------------------------------------------------------------------
# replications


def replicate(cfg: PipelineConfig, seed: int, full: bool = False, outcome: str = "trips_total",
              scenario: synth.ScenarioConfig | None = None) -> dict:
    """Simulate one seed and fit the event study.

    With ``full`` the pings go through filtering, stay detection, homes and
    trips; otherwise device records come straight from the true monthly
    counts and true homes.
    """
    sc = dataclasses.replace(scenario or scenario_for(cfg), seed=int(seed))
    grid = make_grid(cfg)
    if full:
        scn = synth.generate(sc)
        rec = analyze_scenario(scn, cfg)["records"]
    else:
        devices, truth = synth.device_month_counts(sc)
        layout = synth.build_layout(sc)
        rec = records_from_counts(devices, truth, layout.stations, grid)
    pan = panel.build_panel(rec, outcome, cfg.opening_month)
    fit, pt = fit_outcome(pan, cfg)
    ci = fit.conf_int()
    return {"seed": int(seed), "pooled": fit.pooled_post_beta, "pooled_se": fit.pooled_se,
            "beta": fit.beta.to_dict(), "se": fit.se.to_dict(),
            "covers_zero": ((ci["ci_lo"] <= 0) & (ci["ci_hi"] >= 0)).to_dict(),
            "pretrend_p": pt["p"] if pt else float("nan"), "n_obs": fit.n_obs}
