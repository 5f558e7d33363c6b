import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facadescope import fixtures, ingest  # noqa: E402


@pytest.fixture(scope="session")
def mini_dir(tmp_path_factory):
    """A freshly built mini fixture, shared read-only across the session."""
    return fixtures.build_mini_fixture(tmp_path_factory.mktemp("mini"))


@pytest.fixture
def mini_copy(mini_dir, tmp_path):
    """A private copy of the mini fixture that a test may run stages in."""
    import shutil

    dst = tmp_path / "mini"
    shutil.copytree(mini_dir, dst, ignore=shutil.ignore_patterns("out"))
    return dst


@pytest.fixture
def frame():
    return ingest.make_local_frame((4.9, 52.37))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def square_fp(frame, fid, x0, y0, side, tags=None):
    return fixtures.local_footprint(frame, fid, fixtures.rect_ring(x0, y0, x0 + side, y0 + side), tags)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a PASS/FAIL line for an acceptance criterion; lines are echoed
    in the terminal summary so they survive output capture."""

    def _record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
