import json

import pandas as pd
import pytest

from mobiscope import cli
from mobiscope.config import ConfigError, format_config, load_config, parse_config_text

from conftest import write_config


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d)
    assert cli.run(["simulate", "--config", cfg]) == 0
    assert cli.run(["all", "--config", cfg, "--threads", "2"]) == 0
    return d, cfg


def test_simulate_then_all(simulated):
    d, _ = simulated
    work = d / "work"
    for name in ("pings_clean.csv.gz", "device_quality.csv", "reject_report.json", "stays.csv", "homes.csv",
                 "trips.csv", "poi_profiles.csv", "exposure.csv", "device_records.csv", "panel.csv",
                 "fit_trips_total.json", "fit_trips_total.csv", "manifest.json", "timings.json"):
        assert (work / name).exists(), name
    manifest = json.loads((work / "manifest.json").read_text())
    assert sorted(manifest["stages"]) == sorted(cli.STAGES)
    stays = manifest["stages"]["stays"]
    assert stays["outputs"]["stays.csv"]["rows"] > 0
    assert len(stays["outputs"]["stays.csv"]["sha256"]) == 64
    assert "pings_clean.csv.gz" in stays["inputs"]
    panel = pd.read_csv(work / "panel.csv")
    assert list(panel.columns[:6]) == ["hex_id", "month", "outcome", "y", "n_devices", "cable"]


def test_second_run_skips_and_manifest_identical(simulated):
    d, cfg = simulated
    before = (d / "work" / "manifest.json").read_bytes()
    pipe = cli.Pipeline(load_config(cfg))
    assert pipe.run() == {name: False for name in cli.STAGES}
    assert (d / "work" / "manifest.json").read_bytes() == before


def test_report_table(simulated, capsys):
    d, cfg = simulated
    assert cli.run(["report", "--config", cfg, "--outcome", "trips_total"]) == 0
    out = capsys.readouterr().out
    assert "pooled post-opening effect" in out and "pretrend test" in out
    table = pd.read_csv(d / "work" / "report_trips_total.csv")
    assert len(table) == 11
    assert "2018-11" not in set(table["month"])
    assert {"beta", "se", "ci_lo", "ci_hi", "excludes_zero"} <= set(table.columns)


def test_config_change_reruns_downstream_only(tmp_path, simulated):
    d, cfg = simulated
    text = open(cfg).read() + "se_mode = hc1\n"
    alt = d / "alt.cfg"
    alt.write_text(text)
    pipe = cli.Pipeline(load_config(alt))
    ran = pipe.run()
    assert ran == {"ingest": False, "stays": False, "homes": False, "profiles": False, "panel": False,
                   "fit": True}
    assert cli.run(["fit", "--config", cfg]) == 0


def test_fit_without_panel_exits_2(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.run(["fit", "--config", cfg]) == 2
    assert cli.run(["report", "--config", cfg]) == 2


def test_missing_input_is_config_error(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.run(["ingest", "--config", cfg]) == 1


def test_bad_config_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("stay_radius_m = -5\n")
    assert cli.run(["all", "--config", str(p)]) == 1
    p.write_text("no_such_key = 1\n")
    assert cli.run(["all", "--config", str(p)]) == 1
    p.write_text("opening_month = 2020-01\n")
    assert cli.run(["all", "--config", str(p)]) == 1
    assert cli.run(["all", "--config", str(tmp_path / "absent.cfg")]) == 1
    assert "config error" in capsys.readouterr().err


def test_malformed_fit_exits_1(simulated, tmp_path):
    d, cfg = simulated
    other = tmp_path / "w"
    other.mkdir()
    (other / "fit_trips_total.json").write_text('{"periods": "nonsense"}')
    text = open(cfg).read().replace("workdir = work", f"workdir = {other}")
    alt = tmp_path / "alt.cfg"
    alt.write_text(text)
    assert cli.run(["report", "--config", str(alt), "--outcome", "trips_total"]) == 1


def test_singular_design_exits_3(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.run(["simulate", "--config", cfg, "--seed", "3"]) == 0
    # relabel every station as treatment: no control hexagons remain
    st = tmp_path / "input" / "stations.csv"
    st.write_text(st.read_text().replace(",control,", ",treatment,"))
    assert cli.run(["all", "--config", cfg]) == 3


def test_workdir_env_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("MOBISCOPE_WORKDIR", str(tmp_path / "elsewhere"))
    assert load_config(cfg).path("workdir") == tmp_path / "elsewhere"


def test_config_roundtrip(tmp_path):
    cfg = load_config(write_config(tmp_path, stay_radius_m=90, weighted="true"))
    again = parse_config_text(format_config(cfg), base_dir=cfg.base_dir)
    assert again.settings() == cfg.settings()
    assert again.digest() == cfg.digest()
    assert cfg.weighted is True and cfg.stay_radius_m == 90.0
    with pytest.raises(ConfigError):
        parse_config_text("weighted = maybe\n")
    with pytest.raises(ConfigError):
        parse_config_text("outcomes = trips_sideways\n")
