import pytest

from fusioncim.config import default_config
from fusioncim.report import ExperimentPlan, run_experiment


@pytest.fixture(scope="session")
def default_model_arch():
    return default_config()


@pytest.fixture(scope="session")
def default_sweep_rows(default_model_arch):
    model, arch = default_model_arch
    return run_experiment(ExperimentPlan(), model, arch)
