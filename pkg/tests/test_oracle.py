import math

import pytest

from biasreversal import oracle
from biasreversal.cli import main


def test_reference_cdfs():
    assert oracle.logistic_cdf(0.0) == 0.5
    assert oracle.normal_cdf(0.0) == 0.5
    assert oracle.logistic_cdf(-800) == 0.0 and oracle.logistic_cdf(800) == 1.0
    assert oracle.normal_cdf(1.959963984540054) == pytest.approx(0.975, abs=1e-12)
    assert oracle.logistic_cdf(math.log(3)) == pytest.approx(0.75, abs=1e-15)


def test_reference_target_hand_values(popa):
    cells = oracle.raw_cells(popa)
    assert oracle.ref_conditional_mean(cells, 0, 1) == pytest.approx(0.3, abs=1e-15)
    assert oracle.ref_target(cells, "y_given_selected", 0, 1, 0.45, 0.3) == pytest.approx(0.4, abs=1e-15)
    assert oracle.ref_target(cells, "y_given_selected", 0, 0, 0.9, 0.0) is None


def test_reference_top_share():
    assert oracle.ref_top_share([1, 2, 3, 4], [0, 0, 1, 1], 0.5) == {0: 0.0, 1: 1.0}
    assert oracle.ref_top_share([1, 1, 1, 1], [0, 0, 1, 1], 0.5) == {0: 1.0, 1: 1.0}


@pytest.mark.slow
def test_oracle_check_command(capsys):
    assert main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert lines and all(ln.startswith("PASS") for ln in lines)
    assert len(lines) == len(oracle._checks())
