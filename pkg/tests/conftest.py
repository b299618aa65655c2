"""Shared fixtures. Scenario runs are expensive, so each is made once per session."""

from dataclasses import replace

import numpy as np
import pytest

from gaspurity.numerics import IntegratorConfig
from gaspurity.plant_model import PlantParams
from gaspurity.scenario import (Mode, OperatingPoint, ScenarioConfig, commission,
                                paper_configs, run)

MODES = ("open-loop", "measurement feedback", "estimate feedback")


@pytest.fixture(scope="session")
def pp():
    return PlantParams()


@pytest.fixture(scope="session")
def op():
    return OperatingPoint()


@pytest.fixture(scope="session")
def tuning(pp, op):
    return commission(pp, op)


@pytest.fixture(scope="session")
def settings(tuning):
    return tuning[1]


@pytest.fixture(scope="session")
def paper_cfgs(pp, op):
    return paper_configs(pp, op, seed=0)


@pytest.fixture(scope="session")
def paper_runs(pp, paper_cfgs, settings):
    # one warm-up so the timed runs exclude compilation and cache loading
    run(replace(paper_cfgs["open-loop"], duration=10.0, events=()), pp, settings)
    return {name: run(cfg, pp, settings, keep_covariance=True)
            for name, cfg in paper_cfgs.items()}


@pytest.fixture(scope="session")
def halved_runs(pp, paper_cfgs, settings):
    out = {}
    for name, cfg in paper_cfgs.items():
        integ = replace(cfg.integrator, max_step=cfg.integrator.max_step / 2)
        out[name] = run(replace(cfg, integrator=integ), pp, settings)
    return out


@pytest.fixture(scope="session")
def quiet_run(pp, op, settings):
    """Short closed-loop run without events or noise."""
    cfg = ScenarioConfig(duration=300.0, mode=Mode.CLOSED_LOOP,
                         meas_noise_std=(0.0, 0.0, 0.0, 0.0), operating_point=op)
    return run(cfg, pp, settings)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def adaptive():
    return IntegratorConfig()
