import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make `oracles` importable

from imce import models
from imce.compiler import CalibrationSet, compile_model


@pytest.fixture(scope="session")
def resnet8_graph():
    return models.resnet8(fused=True)


@pytest.fixture(scope="session")
def resnet8_calibration():
    rng = np.random.default_rng(42)
    return CalibrationSet(rng.uniform(-1.0, 1.0, size=(8, 3, 16, 16)).astype(np.float32))


@pytest.fixture(scope="session")
def resnet8_compiled(resnet8_graph, resnet8_calibration):
    return compile_model(resnet8_graph, resnet8_calibration)
