import json
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from gaspurity.cli_io import (ConfigError, RunManifest, RunSpec, config_digest, csv_columns,
                              emit_plots, main, parse_config, read_csv, serialize_config,
                              write_csv)
from gaspurity.scenario import Channel, DisturbanceEvent, Mode, ScenarioConfig

SVG = "{http://www.w3.org/2000/svg}"


class TestConfig:
    def test_empty_is_paper_scenario(self):
        spec = parse_config("{}")
        assert spec.paper_events
        assert spec.scenario == ScenarioConfig()
        assert parse_config("") == spec

    def test_field_error_names_key(self):
        with pytest.raises(ConfigError, match="n_segments"):
            parse_config('{"plant": {"n_segments": 0}}')
        with pytest.raises(ConfigError, match="pipe_radius_m"):
            parse_config('{"plant": {"pipe_radius_m": "wide"}}')

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="duraton_s"):
            parse_config('{"scenario": {"duraton_s": 10}}')
        with pytest.raises(ConfigError, match="extras"):
            parse_config('{"extras": 1}')

    def test_bad_values(self):
        for doc, key in [('{"scenario": {"mode": "sideways"}}', "mode"),
                         ('{"scenario": {"duration_s": 10.05}}', "scenario"),
                         ('{"estimator": {"Q_diag": [1, 2]}}', "Q_diag"),
                         ('{"schema_version": 9}', "schema_version"),
                         ('{"scenario": {"seed": 1.5}}', "seed"),
                         ('{"scenario": {"events": [{"t_start_s": 1}]}}', "events"),
                         ("[1, 2", "JSON")]:
            with pytest.raises(ConfigError, match=key):
                parse_config(doc)

    def test_round_trip(self):
        spec = parse_config(json.dumps({
            "scenario": {"duration_s": 600, "mode": "open_loop", "seed": 3,
                         "events": [{"t_start_s": 60, "t_end_s": 120,
                                     "current_density_A_per_m2": 500.0},
                                    {"t_start_s": 200, "t_end_s": 300,
                                     "pressure_difference_bar": 0.4}]},
            "plant": {"n_segments": 4, "pipe_radius_m": 0.01},
            "integrator": {"rel_tol": 1e-7, "method": "fixed-step"},
            "control": {"outer_inner_time_constant_ratio": 12.0},
            "estimator": {"R_diag": [1, 2, 3, 4]},
        }))
        assert spec.scenario.events[1] == DisturbanceEvent(200, 300,
                                                           Channel.PRESSURE_DIFFERENCE, 0.4)
        assert spec.plant.n == 4 and spec.scenario.mode is Mode.OPEN_LOOP
        again = parse_config(serialize_config(spec))
        assert again == spec
        assert serialize_config(again) == serialize_config(spec)

    def test_digest_tracks_content(self):
        a = parse_config("{}")
        b = parse_config('{"scenario": {"seed": 1}}')
        assert config_digest(a) == config_digest(parse_config(serialize_config(a)))
        assert config_digest(a) != config_digest(b)


class TestCsv:
    def test_write_read(self, quiet_run, tmp_path):
        rec = quiet_run.records
        path = tmp_path / "run.csv"
        write_csv(rec, path)
        raw = path.read_bytes()
        assert b"\r\n" not in raw
        cols = read_csv(path)
        assert list(cols) == csv_columns(rec.hto.shape[1])
        assert list(cols)[0] == "t_s"
        assert len(cols["t_s"]) == 300.0 / 0.1 + 1
        np.testing.assert_allclose(cols["hto_est"], rec.hto_est, rtol=1e-8)
        np.testing.assert_allclose(cols["p_c5_bar"], rec.p[:, -1], rtol=1e-8)
        np.testing.assert_array_equal(cols["y_xh2"], rec.y[:, 2])

    def test_no_partial_file(self, quiet_run, tmp_path):
        path = tmp_path / "run.csv"
        path.write_text("old")
        bad = replace(quiet_run.records, hto=None)
        with pytest.raises(Exception):
            write_csv(bad, path)
        assert path.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["run.csv"]

    def test_read_rejects_foreign(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(p)


class TestPlots:
    def test_svg(self, paper_runs, tmp_path):
        path = tmp_path / "fig.svg"
        emit_plots(paper_runs["open-loop"].records, path)
        root = ET.parse(path).getroot()
        assert root.tag == SVG + "svg"
        al = [g for g in root.iter(SVG + "g") if g.get("id") == "alarm-limit"]
        assert len(al) == 1
        assert b"<dc:date>" not in path.read_bytes()

    def test_flat_traces(self, quiet_run, tmp_path):
        path = tmp_path / "quiet.svg"
        emit_plots(quiet_run.records, path)
        ET.parse(path)


def test_manifest(paper_runs):
    spec = RunSpec()
    m = RunManifest.for_run(spec, paper_runs["estimate feedback"])
    doc = json.loads(m.to_json())
    assert doc["config_digest"] == config_digest(spec)
    assert len(doc["parameters"]["resolved_events"]) == 2


class TestMain:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert main([]) == 1

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"plant": {"n_segments": 0}}')
        assert main(["simulate", "--config", str(cfg)]) == 1
        assert "n_segments" in capsys.readouterr().err
        assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 1

    def test_runtime_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"scenario": {"duration_s": 30, "events": []}, '
                       '"integrator": {"max_step_s": 1e-300}}')
        assert main(["simulate", "--config", str(cfg)]) == 2
        assert "error" in capsys.readouterr().err

    def test_simulate_and_replay(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"scenario": {
            "duration_s": 120, "events": [{"t_start_s": 30, "t_end_s": 90,
                                           "current_density_A_per_m2": 800.0}]}}))
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == 0
        for name in ("run.csv", "run.svg", "run.manifest.json"):
            assert (out / name).exists()
        assert json.loads((out / "run.manifest.json").read_text())["seed"] == 4
        assert main(["replay", str(out / "run.csv"), "--config", str(cfg), "--out",
                     str(out)]) == 0
        rep = read_csv_pair(out / "replay.csv")
        orig = read_csv(out / "run.csv")
        assert np.max(np.abs(rep - orig["hto_est"])) <= 1e-9


def read_csv_pair(path):
    return np.loadtxt(path, delimiter=",", skiprows=1)[:, 1]
