import json
from pathlib import Path

import numpy as np
import pytest

ORACLE_PATH = Path(__file__).with_name("oracles.json")

# criterion number -> list of (check name, passed, detail)
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def _decode(obj):
    if isinstance(obj, str) and obj in ("inf", "-inf"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


@pytest.fixture(scope="session")
def oracles():
    return _decode(json.loads(ORACLE_PATH.read_text()))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def record(criterion: int, name: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((name, bool(passed), detail))
    line = f"criterion {criterion} [{name}]: {'PASS' if passed else 'FAIL'} {detail}"
    print(line)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[crit]
        ok = all(p for _, p, _ in checks)
        failed = [n for n, p, _ in checks if not p]
        suffix = "" if ok else f"  (failing: {', '.join(failed)})"
        tr.write_line(f"CRITERION {crit}: {'PASS' if ok else 'FAIL'}{suffix}")
    for crit in sorted(ACCEPTANCE):
        for name, p, detail in ACCEPTANCE[crit]:
            tr.write_line(f"  {crit:>2} {name:<34} {'PASS' if p else 'FAIL'}  {detail}")
