from __future__ import annotations

import re

import pytest

from fmcw_entrain.scenario import bundled_scenario_path, load_bundled, run_all

# (criterion number, name, verdict, detail) recorded by the acceptance tests
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = (number, name, bool(ok), detail)
    ACCEPTANCE_LINES.append(line)
    print(_format(line))


def _format(line) -> str:
    number, name, ok, detail = line
    return f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(_format(line))


@pytest.fixture(scope="session")
def reference_scenario():
    return load_bundled("reference")


@pytest.fixture(scope="session")
def reference_run(reference_scenario):
    """One full identification + tracking run of the bundled scenario (about a minute)."""
    return run_all(reference_scenario)


_SMALL = {
    "n_chirps": "32",
    "frame_interval_ms": "10.0",
    "min_frame_interval_ms": "5.0",
    "max_frame_interval_ms": "15.0",
    "m_search": "16",
    "n_frames": "4",
    "phase_frame": "3",
}


@pytest.fixture(scope="session")
def small_scenario_text():
    """The bundled scenario shrunk to 32 chirps and 10 ms frames (runs in seconds)."""
    text = bundled_scenario_path().read_text(encoding="utf-8")
    for key, value in _SMALL.items():
        text, n = re.subn(rf"^{key} = .*$", f"{key} = {value}", text, flags=re.M)
        assert n == 1, key
    return text


@pytest.fixture
def small_scenario_file(tmp_path, small_scenario_text):
    path = tmp_path / "small.toml"
    path.write_text(small_scenario_text, encoding="utf-8")
    return path
