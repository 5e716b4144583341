import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_setup():
    """Pretrained model, attacker pool, user data and config from a small seeded run."""
    from ttattack.experiment import ExperimentConfig, make_splits, stage_pretrain

    config = ExperimentConfig(seed=0).with_overrides({"data.n_per_class": 600, "stream.n_batches": 4})
    splits = make_splits(config)
    model, _, _ = stage_pretrain(config, splits)
    return config, splits, model.with_mode("batch")


# acceptance verdicts, printed together at the end of the session
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
