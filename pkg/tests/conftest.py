from __future__ import annotations

from dataclasses import replace

import pytest

from histoclean.data import AugmentConfig
from histoclean.synthetic import SyntheticSpec, synthesize_corpus
from histoclean.trainer import TrainConfig

# narrower networks so CPU smoke runs finish in minutes
SMOKE_NETS = dict(base_width=16, disc_widths=(32, 64, 128, 256))


def small_config(variant: str = "base", **kw) -> TrainConfig:
    cfg = TrainConfig(variant=variant, augment=AugmentConfig.for_tile_size(64), **SMOKE_NETS)
    return replace(cfg, **kw)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """16 scenes x 3 classes at 64 px: 16 clean + 48 artifact tiles."""
    out = tmp_path_factory.mktemp("tiny")
    m = synthesize_corpus(SyntheticSpec(16, (0, 1, 3), tile_size=64, seed=7), out)
    return out, m


# --- acceptance reporting ----------------------------------------------------

_RESULTS: list[tuple[str, str, str]] = []
_NOTES: list[str] = []


def note(text: str) -> None:
    """Queue text for the acceptance section of the terminal summary."""
    _NOTES.append(text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for name, args in getattr(report, "criterion", []):
        _RESULTS.append((str(args[0]), args[1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marks = [m for m in item.iter_markers("criterion")]
    rep.criterion = [(item.name, m.args) for m in marks]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS and not _NOTES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, outcome in sorted(_RESULTS, key=lambda r: (int(r[0]), r[1])):
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {num}: {verdict}  {title}")
    for text in _NOTES:
        terminalreporter.write_line("")
        terminalreporter.write_line(text)
