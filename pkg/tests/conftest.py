import pytest
import torch

from genrec.backbone import ModelConfig, build_model
from genrec.tokenizer import _kernels_py

try:
    from genrec.tokenizer import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

KERNELS = [pytest.param(_kernels_py, id="python")]
KERNELS.append(pytest.param(_kernels_c, id="cython", marks=pytest.mark.skipif(_kernels_c is None, reason="extension not built")))


@pytest.fixture(params=KERNELS)
def kernels(request):
    return request.param


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=50, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=32, adapter_rank=4, adapter_alpha=8.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


# -- one summary line per acceptance criterion ---------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[number] = (title, status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, seconds = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] {number:2d}. {title} ({seconds:.1f} s)")
