import numpy as np
import pytest

from bandtok.errors import InvalidInputError
from bandtok.verify import (Check, Report, _faulty_haar, brute_force_nearest, check_haar_energy,
                            check_haar_roundtrip, ema_fixed_point_run, reference_rope_1d, run_suite)


@pytest.fixture(scope="module")
def quick_report():
    return run_suite(0, quick=True)


def test_quick_suite_passes(quick_report):
    assert quick_report.passed, quick_report.text()
    assert len(quick_report.checks) == 14
    assert quick_report.text().endswith("14/14 properties passed")


def test_fault_flags_only_energy():
    rep = run_suite(0, fault="haar-norm", quick=True)
    assert rep.failed() == ["haar-energy-conservation"]
    with pytest.raises(InvalidInputError):
        run_suite(0, fault="nope")


def test_faulty_pair_still_inverts(gen):
    fwd, inv = _faulty_haar()
    assert check_haar_roundtrip(0, 50, fwd, inv).passed
    c = check_haar_energy(0, 50, fwd)
    assert not c.passed and abs(c.measured - (1.01 ** 2 - 1)) < 1e-9


def test_measurements_stable_across_runs(quick_report):
    again = run_suite(0, quick=True)
    assert [(c.name, c.passed, c.measured) for c in again.checks] == \
           [(c.name, c.passed, c.measured) for c in quick_report.checks]


def test_brute_force_small_example():
    codes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    v = np.array([[0.9, 0.0], [0.5, 0.0], [-3.0, 1.0]])
    # 0.5 is equidistant from codes 0 and 1: lowest index wins
    assert list(brute_force_nearest(v, codes)) == [1, 0, 0]


def test_reference_rope_quarter_turn():
    x = np.array([[1.0, 0.0]])
    out = reference_rope_1d(x, np.array([np.pi / 2]), base=1.0)
    assert np.allclose(out, [[0.0, 1.0]], atol=1e-15)


def test_ema_run_shrinks():
    dev, cb, target = ema_fixed_point_run(0, steps=200)
    assert dev[-1] < dev[0] and cb.codes.shape == target.shape


def test_report_formatting():
    r = Report([Check("a", True, 1e-3, "< 1"), Check("b", False, 2.0, "< 1", detail="x")])
    lines = r.text().split("\n")
    assert lines[0].startswith("PASS a") and "measured=1.000e-03" in lines[0]
    assert lines[1].startswith("FAIL b") and lines[1].endswith("(x)")
    assert lines[2] == "1/2 properties passed"
    assert r.to_json()["passed"] is False and r.failed() == ["b"]
