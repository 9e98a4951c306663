import os
import time

import pytest
import torch
from hypothesis import HealthCheck, settings

from promptadapt.adapt import train_supervised
from promptadapt.data import make_toy_domain
from promptadapt.model import build_toy_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(int(os.environ.get("PROMPTADAPT_TEST_THREADS", "1")))

SOURCE_STEPS = 1500


@pytest.fixture(scope="session")
def source_model():
    """Toy model trained on clean blobs; shared by the end-to-end tests."""
    start = time.perf_counter()
    model = build_toy_model(seed=0, feature_dim=64)
    train_supervised(model, make_toy_domain("clean", 400, seed=1), SOURCE_STEPS, lr=1e-3)
    model.pretrain_seconds = time.perf_counter() - start
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture
def toy_model():
    return build_toy_model(seed=0, feature_dim=16)


def pytest_terminal_summary(terminalreporter):
    from _criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
