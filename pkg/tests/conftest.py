import numpy as np
import pytest

from kvdistill import kernels
from kvdistill.model import ModelConfig, init_random

BACKENDS = ["python"] + (["compiled"] if kernels.compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


def acceptance_config(seed: int = 0, vocab: int = 512) -> ModelConfig:
    return ModelConfig.build(num_layers=8, num_q_heads=4, num_kv_heads=2, head_dim=16,
                             vocab_size=vocab, seed=seed)


def random_prompt(n: int, vocab: int, seed: int) -> list[int]:
    return np.random.default_rng(seed).integers(0, vocab, size=n).tolist()


@pytest.fixture(scope="session")
def bundle():
    return init_random(acceptance_config(seed=0))


@pytest.fixture(scope="session")
def small_bundle():
    return init_random(ModelConfig.build(num_layers=4, num_q_heads=4, num_kv_heads=2,
                                         head_dim=8, vocab_size=300, seed=3))


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    number, title = mark.args
    ok = report.passed and _CRITERIA.get(number, (title, True))[1]
    if report.when == "call" or not report.passed:
        _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
