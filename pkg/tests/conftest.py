import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; a test that dies before recording is reported as FAIL."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})
    name = request.node.name
    number = int(name.split("_")[1])
    recorded = []

    def record(ok: bool, detail: str) -> bool:
        results[number] = (bool(ok), f"{name.split('_', 2)[2]}: {detail}")
        recorded.append(ok)
        return ok

    yield record
    if not recorded:
        results[number] = (False, f"{name.split('_', 2)[2]}: did not complete")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {detail}")
