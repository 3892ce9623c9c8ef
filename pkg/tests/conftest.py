from pathlib import Path

import pytest

import vixlab

DATA = Path(vixlab.__file__).parent / "data"
SCENARIOS = DATA / "scenarios"
CHAINS = DATA / "chains"


@pytest.fixture
def scenario_dir():
    return SCENARIOS


@pytest.fixture
def chain_dir():
    return CHAINS


# criterion -> {part: (passed, detail)}; filled by test_acceptance.py
ACCEPTANCE: dict[int, dict[str, tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for p, _ in parts.values())
        detail = "; ".join(f"{k}: {'ok' if p else 'FAIL'} ({d})" for k, (p, d) in parts.items())
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
