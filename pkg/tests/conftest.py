import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def toy_prep():
    """Backdoored SmallCNN on the default synthetic task (trained once per session)."""
    from awmlab.harness import ExperimentConfig, prepare
    return prepare(ExperimentConfig())


@pytest.fixture
def tiny_model():
    from awmlab.models import build_model, small_cnn_spec
    from helpers import tiny_dataset
    data = tiny_dataset()
    model, _ = build_model(small_cnn_spec(data.image_shape, data.classes), seed=0)
    return model, data


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
