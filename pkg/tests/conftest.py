import pytest

from pflcombo.harness.config import config_from_dict


def small_raw(**sections):
    raw = {
        "seed": 1,
        "data": {"num_classes": 3, "input_dim": 4, "examples_per_class": 30, "class_separation": 2.0},
        "partition": {"num_clients": 3, "dirichlet_alpha": 1.0},
        "model": {"hidden_dim": 3},
        "federation": {"rounds": 3, "local_lr": 0.1},
        "personalization": {"ft_epochs": 2, "baseline_epochs": 2, "fisher_samples": 20},
    }
    for key, value in sections.items():
        raw[key] = {**raw.get(key, {}), **value} if isinstance(value, dict) else value
    return raw


@pytest.fixture
def small_config():
    def make(**sections):
        return config_from_dict(small_raw(**sections))

    return make


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
