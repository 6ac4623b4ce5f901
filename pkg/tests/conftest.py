import pytest
import torch

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call ``criterion(ok, detail)`` before asserting."""
    name = request.node.function.__doc__.strip().splitlines()[0]
    recorded = []

    def record(ok: bool, detail: str = "") -> bool:
        recorded.append((name, bool(ok), detail))
        return ok

    yield record
    if recorded:
        ok = all(r[1] for r in recorded)
        ACCEPTANCE.append((name, ok, "; ".join(r[2] for r in recorded if r[2])))
    else:
        ACCEPTANCE.append((name, False, "did not reach its check"))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
