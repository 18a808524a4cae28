"""The ten acceptance criteria, one test each, plus the fault-injection checks.

Each criterion prints a ``[PASS]``/``[FAIL]`` line; the lines are also
collected and repeated in the terminal summary.
"""

import numpy as np
import pytest

from monodiff import acceptance
from monodiff.cli import main

RESULT_LINES = []


@pytest.mark.parametrize("k", range(len(acceptance.CRITERIA)),
                         ids=[fn.__name__.replace("criterion_", "") for fn in acceptance.CRITERIA])
def test_criterion(k):
    res = acceptance.CRITERIA[k](np.random.default_rng([0, k]))
    line = res.line()
    RESULT_LINES.append(line)
    print(line)
    assert res.number == k + 1
    assert res.passed, line


def test_oversized_step_fails_contraction_criterion():
    res = acceptance.criterion_contraction(np.random.default_rng([0, 2]), gamma_scale=2.5, instances=10)
    assert not res.passed


def test_shifted_jacobian_fails_fd_criterion():
    res = acceptance.criterion_smooth(np.random.default_rng([0, 0]), jacobian_shift=0.1, instances=5)
    assert not res.passed


def test_unperturbed_small_runs_pass():
    assert acceptance.criterion_contraction(np.random.default_rng(1), instances=10).passed
    assert acceptance.criterion_smooth(np.random.default_rng(1), instances=5).passed


def test_selftest_command_reports_failures(capsys, monkeypatch):
    monkeypatch.setattr(acceptance, "CRITERIA", [acceptance.criterion_smooth, acceptance.criterion_minmax])
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2 and "2/2 criteria passed" in out
    assert main(["selftest", "--jacobian-shift", "0.1"]) == 2
    assert "[FAIL]  1 " in capsys.readouterr().out
