import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqground.geometry import convex_shape
from seqground.metrics import (EvalReport, MetricsError, inconsistency_error, mean_iou, precision_at,
                               upper_bound_sweep)

ious_strategy = st.lists(st.floats(0, 1), min_size=1, max_size=50)


def test_precision_examples():
    assert precision_at([1.0, 1.0], 0.5) == 1.0
    assert precision_at([0.5], 0.5) == 0.0  # strictly larger than the threshold
    assert precision_at([0.6, 0.4], 0.5) == 0.5
    with pytest.raises(MetricsError):
        precision_at([], 0.5)
    with pytest.raises(MetricsError):
        precision_at([0.3], 1.0)


@settings(max_examples=100)
@given(ious_strategy, st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_precision_non_increasing(ious, t, dt):
    assert precision_at(ious, t) >= precision_at(ious, t + dt)


def test_mean_iou_examples(rng):
    assert mean_iou([1, 0]) == 0.5
    assert mean_iou([0.3] * 7) == pytest.approx(0.3)
    xs = rng.random(10_000)
    total = 0.0
    for x in xs:
        total += x
    assert mean_iou(xs) == pytest.approx(total / len(xs), rel=1e-12)
    with pytest.raises(MetricsError):
        mean_iou([])


def test_inconsistency_examples(rng):
    assert inconsistency_error([0.9, 0.8], [0.7, 0.6]) == 0.0
    assert inconsistency_error([0.9, 0.8], [0.1, 0.2]) == 1.0
    b, m = rng.random(200), rng.random(200)
    xor = sum(1 for x, y in zip(b, m) if (x > 0.5) != (y > 0.5))
    assert inconsistency_error(b, m) == xor / 200
    with pytest.raises(MetricsError):
        inconsistency_error([0.1], [0.1, 0.2])


@settings(max_examples=50)
@given(ious_strategy)
def test_identical_correctness_gives_zero_ie(ious):
    assert inconsistency_error(ious, ious) == 0.0


def test_upper_bound_sweep_values():
    rng = np.random.default_rng(0)
    masks = [convex_shape(64, 64, rng) for _ in range(20)]
    table = upper_bound_sweep(masks, [4, 36], "uniform")
    assert [n for n, _ in table] == [4, 36]
    assert all(0 <= v <= 1 for _, v in table)
    assert table[1][1] >= 0.95
    with pytest.raises(MetricsError):
        upper_bound_sweep([], [4])


def test_report_serialisation_round_trip():
    rep = EvalReport.from_ious("multitask", [0.95, 0.75, 0.2, 0.55], degenerate=1, box_ious=[0.9, 0.1, 0.6, 0.7])
    assert rep.precision == {0.5: 0.75, 0.7: 0.5, 0.9: 0.25}
    assert rep.inconsistency == 0.5
    back = EvalReport.from_kv(rep.to_kv())
    assert back.to_dict() == rep.to_dict()
    assert "degenerate=1" in rep.to_kv()
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,value" and "prec@0.5,0.750000" in lines


@settings(max_examples=50)
@given(ious_strategy)
def test_report_precisions_ordered(ious):
    p = EvalReport.from_ious("res", ious).precision
    assert 1 >= p[0.5] >= p[0.7] >= p[0.9] >= 0
