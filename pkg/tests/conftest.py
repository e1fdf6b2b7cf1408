import numpy as np
import pytest

from memotion.dataio.synthetic import generate_synthetic_dataset
from memotion.fusion import HeadBankConfig, ModelConfig
from memotion.image_encoder import ImageEncoderConfig
from memotion.text_encoder import TextEncoderConfig

_criteria: dict[int, tuple[str, list[bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = getattr(report, "criterion_number", None)
    if number is None:
        return
    title, outcomes = _criteria.setdefault(number, (report.criterion_title, []))
    outcomes.append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion_number, report.criterion_title = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        verdict = "PASS" if outcomes and all(outcomes) else "FAIL"
        terminalreporter.write_line(f"{verdict}  criterion {number:2d}: {title} ({sum(outcomes)}/{len(outcomes)} tests)")


def tiny_model_config(variant="multimodal", seed=0, layers=1) -> ModelConfig:
    """Small enough for a training epoch in well under a second."""
    return ModelConfig(
        variant=variant,
        text=TextEncoderConfig(vocab_size=256, embed_dim=8, hidden_dim=16, num_layers=layers, num_heads=2, ff_dim=32,
                               max_seq_len=16),
        image=ImageEncoderConfig(input_resolution=32, stack_channels=[4, 4, 8, 8, 16]),
        heads=HeadBankConfig(hidden1=16, hidden2=8),
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic_dataset(40, seed=3, resolution=32, max_seq_len=16).samples


@pytest.fixture
def tiny_config():
    return tiny_model_config()
