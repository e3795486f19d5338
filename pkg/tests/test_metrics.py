import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncnn.errors import ContractError
from ncnn.labels import NO_PAIN, PAIN
from ncnn.metrics import (PredictionRecord, bin_index, calibration_curve, classification_metrics, confidence_histogram,
                          ece, paired_t_test, read_records, write_curve_csv, write_histogram_csv, write_records)

from oracles import brute_force_ece, t_sf


def rec(c, label, fold=0):
    return PredictionRecord(float(c), label, fold)


def counts_to_records(tp, fp, fn, tn):
    return [rec(0.9, PAIN)] * tp + [rec(0.9, NO_PAIN)] * fp + [rec(0.1, PAIN)] * fn + [rec(0.1, NO_PAIN)] * tn


# -- classification -------------------------------------------------------------


def test_all_correct():
    m = classification_metrics(counts_to_records(4, 0, 0, 3))
    assert (m.accuracy, m.f1, m.precision, m.recall) == (1.0, 1.0, 1.0, 1.0)


def test_hand_computed_metrics():
    m = classification_metrics(counts_to_records(3, 1, 2, 4))
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.6)
    assert m.f1 == pytest.approx(2 / 3, abs=1e-4)
    assert m.accuracy == pytest.approx(0.7)


def test_no_predicted_positives():
    m = classification_metrics(counts_to_records(0, 0, 3, 2))
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0
    assert "precision" in m.undefined


def test_threshold_is_inclusive():
    assert classification_metrics([rec(0.5, PAIN)]).tp == 1


def test_empty_records():
    with pytest.raises(ContractError):
        classification_metrics([])


def test_record_validation():
    with pytest.raises(ContractError):
        PredictionRecord(1.2, PAIN)
    with pytest.raises(ContractError):
        PredictionRecord(0.2, "ouch")


# -- paired t-test ----------------------------------------------------------------


def test_identical_samples():
    r = paired_t_test([0.8, 0.9, 0.85], [0.8, 0.9, 0.85])
    assert (r.t_statistic, r.p_value, r.degenerate) == (0.0, 1.0, False)


def test_zero_variance_nonzero_mean_is_degenerate():
    r = paired_t_test([2, 2, 2, 2], [1, 1, 1, 1])
    assert r.degenerate and math.isinf(r.t_statistic)


def test_worked_t_statistic_and_oracle_p():
    d = np.array([0.02, 0.05, 0.01, 0.04, 0.03])
    r = paired_t_test(d, np.zeros(5))
    assert r.t_statistic == pytest.approx(0.03 / (0.0158114 / math.sqrt(5)), rel=1e-5)
    assert r.t_statistic == pytest.approx(4.24, abs=0.005)
    assert abs(r.p_value - float(2 * t_sf(r.t_statistic, 4))) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=12))
def test_p_value_against_mpmath(values):
    a = np.array(values)
    b = np.linspace(-0.3, 0.3, len(values))
    r = paired_t_test(a, b)
    if r.degenerate or r.t_statistic == 0:
        return
    assert abs(r.p_value - float(min(1, 2 * t_sf(abs(r.t_statistic), len(values) - 1)))) <= 1e-6


def test_t_test_contract():
    with pytest.raises(ContractError):
        paired_t_test([1, 2], [1, 2, 3])
    with pytest.raises(ContractError):
        paired_t_test([1], [2])


# -- calibration ------------------------------------------------------------------


def test_top_bin_only():
    report = calibration_curve([rec(1.0, PAIN)] * 5)
    assert report.curve() == [(1.0, 1.0, 5)]
    assert report.ece == 0.0


def test_two_records_two_bins():
    report = calibration_curve([rec(0.05, NO_PAIN), rec(0.95, PAIN)])
    occupied = [(i + 1, b.frequency) for i, b in enumerate(report.bins) if b.count]
    assert occupied == [(1, 0.0), (10, 1.0)]


def test_all_overconfident():
    assert ece([rec(0.9, NO_PAIN)] * 40) == pytest.approx(0.9, abs=1e-15)


def test_monte_carlo_calibrated_stream():
    rng = np.random.default_rng(0)
    c = rng.uniform(size=100000)
    y = rng.uniform(size=100000) < c
    records = [rec(ci, PAIN if yi else NO_PAIN) for ci, yi in zip(c, y)]
    report = calibration_curve(records)
    assert all(abs(b.frequency - b.mean_confidence) <= 0.02 for b in report.bins if b.count)
    assert report.ece <= 0.02


def test_ece_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    edges = np.arange(11) / 10
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        c = rng.uniform(size=n)
        # boundary values and exact extremes stress the interval convention
        pick = rng.uniform(size=n) < 0.2
        c[pick] = rng.choice(edges, size=pick.sum())
        y = rng.uniform(size=n) < rng.uniform()
        records = [rec(ci, PAIN if yi else NO_PAIN) for ci, yi in zip(c, y)]
        assert ece(records) == brute_force_ece(list(c), [float(v) for v in y])


@pytest.mark.parametrize("c,expected", [(0.0, 0), (0.1, 1), (0.3, 3), (0.7, 7), (0.9999, 9), (1.0, 9), (0.6, 6)])
def test_bin_boundaries(c, expected):
    assert bin_index(c) == expected


def test_per_fold_ece():
    records = [rec(0.9, NO_PAIN, 0), rec(0.9, PAIN, 1)]
    report = calibration_curve(records)
    assert report.per_fold_ece == {"0": pytest.approx(0.9), "1": pytest.approx(0.1)}


def test_histogram_uniform():
    rng = np.random.default_rng(2)
    counts = confidence_histogram([rec(c, PAIN) for c in rng.uniform(size=10000)])
    assert sum(counts) == 10000
    assert all(abs(n - 1000) <= 150 for n in counts)


def test_histogram_single_mass():
    assert confidence_histogram([rec(0.95, PAIN)] * 7) == [0] * 9 + [7]
    assert confidence_histogram([rec(0.1, PAIN)]) == [0, 1] + [0] * 8


def test_report_files(tmp_path):
    records = [rec(0.05, NO_PAIN, 0), rec(0.95, PAIN, 1), rec(0.55, PAIN, 1)]
    write_records(records, tmp_path / "p.jsonl")
    assert read_records(tmp_path / "p.jsonl") == records
    write_curve_csv(calibration_curve(records), tmp_path / "c.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 4
    write_histogram_csv(confidence_histogram(records), tmp_path / "h.csv")
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 11
