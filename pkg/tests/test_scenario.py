from dataclasses import replace

import numpy as np
import pytest

from gaspurity.control import ALARM_LIMIT, HTO_SETPOINT, FeedbackSource
from gaspurity.scenario import (Channel, CommissioningConfig, DisturbanceEvent, Mode,
                                ScenarioConfig, calibrate_disturbances, noise_streams,
                                paper_disturbance_sequence, quantize, run, steady_separator_hto,
                                t_oob, table1_report)


class TestConfig:
    def test_defaults(self):
        cfg = ScenarioConfig()
        assert cfg.duration == 9000.0 and cfg.n_ticks == 90000
        assert cfg.mode is Mode.CLOSED_LOOP and cfg.feedback_source is FeedbackSource.ESTIMATE

    def test_validation(self):
        with pytest.raises(ValueError):
            ScenarioConfig(duration=10.05)
        with pytest.raises(ValueError):
            ScenarioConfig(duration=100.0, events=(DisturbanceEvent(50, 200, Channel.CURRENT_DENSITY,
                                                                    500.0),))
        with pytest.raises(ValueError):
            DisturbanceEvent(10.0, 5.0, Channel.CURRENT_DENSITY, 500.0)
        with pytest.raises(ValueError):
            ScenarioConfig(mode="half_open")
        with pytest.raises(ValueError):
            CommissioningConfig(hto_sp=0.03)

    def test_only_estimate_feedback_is_noisy(self):
        assert ScenarioConfig().noisy
        assert not ScenarioConfig(feedback_source="measurement").noisy
        assert not ScenarioConfig(mode="open_loop").noisy


@pytest.fixture(scope="module")
def calib():
    return calibrate_disturbances()


class TestCalibration:
    def test_targets(self, calib, pp, op):
        I_low, dp_high = calib
        assert steady_separator_hto(pp, op, I=I_low) >= ALARM_LIMIT
        assert steady_separator_hto(pp, op, dp=dp_high) >= ALARM_LIMIT
        assert steady_separator_hto(pp, op) < HTO_SETPOINT
        assert I_low < op.I and dp_high > op.dp

    def test_sequence(self, calib):
        ev = paper_disturbance_sequence(calib)
        assert len(ev) == 2
        assert (ev[0].t_start, ev[0].t_end) == (1800.0, 3600.0)
        assert (ev[1].t_start, ev[1].t_end) == (5400.0, 7200.0)
        assert ev[0].channel is Channel.CURRENT_DENSITY
        assert ev[1].channel is Channel.PRESSURE_DIFFERENCE


class TestRun:
    def test_quiet_run_stays_nominal(self, quiet_run):
        rec = quiet_run.records
        assert len(rec) == 3001
        assert np.max(np.abs(rec.hto / rec.hto[0] - 1)) < 1e-8
        assert np.all(rec.p_sp == 20.0)
        assert quiet_run.t_oob_per_event == []

    def test_inputs_nominal_outside_events(self, paper_runs, op):
        rec = paper_runs["open-loop"].records
        outside = (rec.t < 1800) | ((rec.t >= 3600) & (rec.t < 5400)) | (rec.t >= 7200)
        assert np.all(rec.I[outside] == op.I) and np.all(rec.dp[outside] == op.dp)
        assert np.all(rec.I[(rec.t >= 1800) & (rec.t < 3600)] < op.I)

    def test_open_loop_holds_pressure_setpoint(self, paper_runs):
        assert np.all(paper_runs["open-loop"].records.p_sp == 20.0)

    def test_noise_streams_reproducible(self):
        a = noise_streams(7, 1000)
        np.testing.assert_array_equal(a, noise_streams(7, 1000))
        assert not np.array_equal(a, noise_streams(8, 1000))
        assert abs(np.corrcoef(a.T)[0, 1]) < 0.1

    def test_quantize(self):
        assert quantize(1.23456789012) == 1.23456789
        assert quantize(0.0) == 0.0

    def test_setpoint_schedule_step(self, pp, settings, op):
        cfg = ScenarioConfig(duration=60.0, mode=Mode.OPEN_LOOP, meas_noise_std=(0, 0, 0, 0),
                             operating_point=op)
        sched = np.full(cfg.n_ticks + 1, 20.0)
        sched[100:] = 19.0
        rec = run(cfg, pp, settings, setpoint_schedule=sched).records
        assert rec.p_sp[99] == 20.0 and rec.p_sp[100] == 19.0
        assert rec.p[-1, -1] < 19.2


class TestTOob:
    def test_no_exceedance(self, quiet_run):
        assert t_oob(quiet_run.records) == 0.0

    def test_open_loop(self, paper_runs):
        rec = paper_runs["open-loop"].records
        assert t_oob(rec, window=(5400.0, 7200.0)) == pytest.approx(30.0, abs=0.01)
        assert t_oob(rec, window=(1800.0, 3600.0)) >= 29.0


class TestTable1:
    def test_ordering(self, paper_runs):
        t = {k: v.t_oob_per_event for k, v in paper_runs.items()}
        for i in range(2):
            assert t["estimate feedback"][i] < t["measurement feedback"][i] < t["open-loop"][i]
        assert t["measurement feedback"][0] / t["estimate feedback"][0] >= 5

    def test_report(self, paper_runs):
        text = table1_report(paper_runs)
        assert text.splitlines()[0].split()[-2:] == ["event", "2"]
        assert len(text.splitlines()) == 5
        assert text == table1_report(paper_runs)


class TestCommissioning:
    def test_pressure_loop_tight(self, tuning):
        report, settings = tuning
        pc = report.get("PC")
        assert pc.tau_c == pc.model.theta
        assert pc.model.integrating and settings.pc_direction == -1

    def test_concentration_sign(self, tuning):
        report, settings = tuning
        assert settings.cc_direction == 1
        assert report.get("CC (estimate)").model.k > 0

    def test_report_text(self, tuning):
        text = tuning[0].text()
        for name in ("PC:", "LC:", "CC (estimate)", "CC (measurement)", "inner closed loop"):
            assert name in text

    def test_settings_replace(self, settings):
        s = settings.with_cc("measurement", 1.0, 2.0, 1)
        assert s.cc_tuning(FeedbackSource.MEASUREMENT) == (1.0, 2.0)
        assert s.cc_tuning("estimate") == settings.cc_tuning("estimate")
        assert replace(settings) == settings


def test_inner_loop_overshoot(pp, op, settings):
    cfg = ScenarioConfig(duration=200.0, mode=Mode.OPEN_LOOP, meas_noise_std=(0, 0, 0, 0),
                         operating_point=op)
    sched = np.full(cfg.n_ticks + 1, 20.0)
    sched[100:] = 19.0
    p = run(cfg, pp, settings, setpoint_schedule=sched).records.p[:, -1]
    overshoot = (19.0 - p.min()) / 1.0
    assert overshoot < 0.05
    assert abs(p[-1] - 19.0) < 0.01


def test_estimate_feedback_clears_alarm_first(paper_runs, paper_cfgs):
    def last_above(rec, ev):
        win = (rec.t >= ev.t_start) & (rec.t < ev.t_end) & (rec.hto[:, -2] > ALARM_LIMIT)
        return rec.t[win].max() if win.any() else ev.t_start

    for ev in paper_cfgs["open-loop"].events:
        est = last_above(paper_runs["estimate feedback"].records, ev)
        meas = last_above(paper_runs["measurement feedback"].records, ev)
        assert est <= meas
