import numpy as np
import pytest

from varbench.dataio import SynthSpec, leave_one_out, synthesize_dataset
from varbench.ife import TrainConfig, train


@pytest.fixture(scope="session")
def synthetic():
    """Default synthetic catalog: (interactions, images)."""
    return synthesize_dataset(SynthSpec())


@pytest.fixture(scope="session")
def split(synthetic):
    return leave_one_out(synthetic[0])


@pytest.fixture(scope="session")
def standard_ife(synthetic):
    model, hist = train(synthetic[1], TrainConfig(), "traditional")
    return model, hist


@pytest.fixture(scope="session")
def small_images():
    _, images = synthesize_dataset(SynthSpec(images_per_class=20, num_users=5, interactions_per_user=2, image_size=8))
    return images


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        print(line)
        lines.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
