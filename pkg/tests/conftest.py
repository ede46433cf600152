import dataclasses

import pytest

from mobiscope import synth
from mobiscope.config import PipelineConfig
from mobiscope.pipeline import analyze_scenario

SMALL = dict(n_devices_per_arm=40, n_background_devices=20)


def small_scenario_config(**changes) -> synth.ScenarioConfig:
    return dataclasses.replace(synth.ScenarioConfig(**SMALL), **changes)


def write_config(directory, **overrides) -> str:
    """Config file for a small synthetic run inside ``directory``."""
    lines = {"pings": "input/pings.csv.gz", "pois": "input/pois.csv", "zones": "input/zones.geojson",
             "regions": "input/regions.geojson", "stations": "input/stations.csv", "workdir": "work",
             "outcomes": "trips_total,trips_high,mean_entropy",
             "scenario.n_devices_per_arm": 40, "scenario.n_background_devices": 20}
    lines.update(overrides)
    path = directory / "mobiscope.cfg"
    path.write_text("# test run\n" + "".join(f"{k} = {v}\n" for k, v in lines.items() if v is not None))
    return str(path)


@pytest.fixture(scope="session")
def small_scenario():
    return synth.generate(small_scenario_config())


@pytest.fixture(scope="session")
def small_analysis(small_scenario):
    return analyze_scenario(small_scenario, PipelineConfig(), exposure=True)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
