"""
Shared fixtures for the CAM test suite
"""
import numpy as np
import pytest

from cam_navigation.admissibility import CamModel
from cam_navigation.models import EnvKind, TaskSpec
from cam_navigation.worlds import reset_clamp_count, sample_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def fresh_clamp_counter():
    reset_clamp_count()
    yield
    reset_clamp_count()


@pytest.fixture
def small_car_model():
    """A small GNN so that gradient checks stay quick"""
    return CamModel.initialize(EnvKind.CAR, hidden=6, layers=1, rng=np.random.default_rng(7))


@pytest.fixture
def integrator_model():
    return CamModel.initialize(EnvKind.INTEGRATOR, hidden=8, rng=np.random.default_rng(11))


@pytest.fixture
def car_world():
    return sample_task(TaskSpec(EnvKind.CAR, n_agents=3, n_obstacles=3, map_size=3.0, seed=5))


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    """Point the artifact root at a temporary directory"""
    root = tmp_path / 'runs'
    monkeypatch.setenv('CAM_OUTPUT_ROOT', str(root))
    return root
