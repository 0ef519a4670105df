import pytest

from sbridge.identities import CASES, BatteryRow, case_residuals, format_table


def test_case_catalog():
    assert len(CASES) == 5
    assert {c.dim for c in CASES} == {1, 2}
    assert len({c.name for c in CASES}) == 5


def test_row_ratios_and_band():
    row = BatteryRow("c", "general", (16.0, 4.0, 1.0))
    assert row.ratios == (4.0, 4.0) and row.passed
    assert not BatteryRow("c", "general", (16.0, 8.0, 4.0)).passed


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.name)
def test_residuals_shrink(case):
    coarse = case_residuals(case, 32)
    fine = case_residuals(case, 64)
    for a, b in zip(coarse, fine):
        assert a > 0 and 3.0 <= a / b <= 5.0


def test_format_table():
    lines = format_table([BatteryRow("poly", "beta=1", (4.0, 1.0, 0.25))])
    assert lines[0].startswith("case") and lines[1].endswith("ok")
