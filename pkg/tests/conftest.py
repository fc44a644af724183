import numpy as np
import pytest

from flagp.calibration import CalibrationProblem
from flagp.emulator import EmulatorConfig, fit
from flagp.gp_core import SubsampleSpec
from flagp.studies import emulation_ensemble, unbiased_study

BLHS4 = SubsampleSpec("blhs", 4, 25)


@pytest.fixture(scope="session")
def ball_ensemble():
    return emulation_ensemble(242, seed=0)


@pytest.fixture(scope="session")
def ball_model(ball_ensemble):
    return fit(ball_ensemble, EmulatorConfig(subsample=BLHS4, seed=0))


@pytest.fixture(scope="session")
def unbiased():
    st = unbiased_study(242, seed=0)
    model = fit(st.ensemble, EmulatorConfig(subsample=BLHS4, seed=0))
    return st, model, CalibrationProblem.from_field(model, st.field, t_dim=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
