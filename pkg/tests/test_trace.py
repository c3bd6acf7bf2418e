import math

import pytest

from svmax_lab.errors import FormatError, InvalidInput
from svmax_lab.metrics import EvalReport
from svmax_lab.trace import RunTrace, read_config


def report(it, loss=0.5):
    return EvalReport(it, loss, 1.0, 0.25, 1.4, {1: math.nan, 4: math.nan, 8: math.nan}, math.nan)


def test_round_trip(tmp_path):
    t = RunTrace(config={"seed": 3, "lr": 0.01})
    for it in (1, 2, 5):
        t.append(report(it, 0.1 * it))
    path = tmp_path / "trace.csv"
    t.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config ") and lines[1] == EvalReport.CSV_HEADER
    back = RunTrace.from_csv(path)
    assert back.config == t.config and back.column("iteration") == [1, 2, 5]
    assert back.column("loss") == t.column("loss")
    assert back.to_csv() == t.to_csv()
    assert read_config(path) == {"seed": 3, "lr": 0.01}


def test_iterations_strictly_increase():
    t = RunTrace()
    t.append(report(2))
    with pytest.raises(InvalidInput):
        t.append(report(2))


def test_diverged_marker(tmp_path):
    t = RunTrace(config={}, diverged_at=9)
    t.append(report(1))
    path = tmp_path / "t.csv"
    t.to_csv(path)
    assert RunTrace.from_csv(path).diverged_at == 9


def test_bad_files(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        RunTrace.from_csv(p)
    with pytest.raises(FormatError):
        read_config(p)
