import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, keyed by criterion label ("3", "7(iii)", ...): (status, detail)
ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def criterion():
    def record(label: str, ok: bool | None, detail: str = "") -> None:
        ACCEPTANCE[label] = ("PASS" if ok else "REPORT" if ok is None else "FAIL", detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    groups: dict[str, list[str]] = {}
    for label in ACCEPTANCE:
        groups.setdefault(label.split("(")[0], []).append(label)
    for num in sorted(groups, key=int):
        parts = groups[num]
        statuses = [ACCEPTANCE[p][0] for p in parts]
        overall = "FAIL" if "FAIL" in statuses else "PASS"
        if parts == [num]:
            tr.write_line(f"criterion {num}: {overall}  {ACCEPTANCE[num][1]}")
            continue
        tr.write_line(f"criterion {num}: {overall}")
        for p in parts:
            tr.write_line(f"  {p}: {ACCEPTANCE[p][0]}  {ACCEPTANCE[p][1]}")
