import hypothesis
import numpy as np
import pytest
import torch

from bbsfda.data import SyntheticShiftSpec, generate_synthetic_pair
from bbsfda.models import ModelSpec

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

torch.set_num_threads(1)

_ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Call with (number, title, passed, detail) to log an acceptance line."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE_LINES.append((number, title, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE_LINES, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}  {detail}")


@pytest.fixture(scope="session")
def tiny_domains():
    spec = SyntheticShiftSpec(intensity_offset=0.1, blur_sigma=1.0, contrast_scale=0.7, noise_std=0.08, seed=3)
    return generate_synthetic_pair(spec, n_train=6, n_test=4, image_size=16)


@pytest.fixture
def tiny_spec():
    return ModelSpec(arch="tiny-encdec", depth=2, init_seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
