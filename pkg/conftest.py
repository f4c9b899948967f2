import os
import sys
import tempfile

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

# Set test environment defaults
os.environ.setdefault("LOG_LEVEL", "WARNING")
os.environ.setdefault("SKIP_SLOW_TESTS", "1")  # desk experiments are opt-in

from models import TaskEnum  # noqa: E402
from schemas import ModelDims, PatientRecord, Visit  # noqa: E402


@pytest.fixture(autouse=True)
def test_settings_env():
    """Keep output paths and log files from leaking out of the test run"""
    saved = {key: os.environ.get(key) for key in ("RETAIN_DATA_DIR", "LOG_FILE")}
    for key in saved:
        os.environ.pop(key, None)
    yield
    for key, value in saved.items():
        if value is not None:
            os.environ[key] = value


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files"""
    temp_dir = tempfile.mkdtemp(prefix="retain-test-")
    yield temp_dir
    # Cleanup handled by OS


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_dims():
    return ModelDims(r=10, m=4, p=4, q=4, s=1, hidden=4)


@pytest.fixture
def l2d_record():
    """Five visits over a 10-code vocabulary with a positive terminal label"""
    visits = [
        Visit(day=0, codes=[0, 3]),
        Visit(day=12, codes=[1]),
        Visit(day=30, codes=[2, 5, 7]),
        Visit(day=31, codes=[4]),
        Visit(day=90, codes=[5, 9]),
    ]
    return PatientRecord(patient_id="P000001", task=TaskEnum.l2d, n_labels=1, visits=visits, labels=[[0]])


@pytest.fixture
def esm_record():
    """Four visits, three labels per next-visit step"""
    visits = [
        Visit(day=0, codes=[0, 1]),
        Visit(day=7, codes=[2]),
        Visit(day=20, codes=[1, 6]),
        Visit(day=45, codes=[3, 8]),
    ]
    labels = [[2], [1], [0, 2], []]
    return PatientRecord(patient_id="P000002", task=TaskEnum.esm, n_labels=3, visits=visits, labels=labels)
