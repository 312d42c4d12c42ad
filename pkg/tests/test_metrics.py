import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loralab.errors import UsageError
from loralab.metrics import AccuracyMatrix, avg_accuracy, compute_metrics


def _matrix(rows):
    m = AccuracyMatrix(n_tasks=len(rows))
    for row in rows:
        m.add_row(row)
    return m


def test_constant_matrix():
    m = _matrix([[0.5], [0.5, 0.5], [0.5, 0.5, 0.5]])
    avg, forget = compute_metrics(m)
    assert avg == 0.5
    assert forget == 0.0


def test_two_task_hand_case():
    m = _matrix([[0.9], [0.7, 0.8]])
    avg, forget = compute_metrics(m)
    assert abs(avg - 0.75) <= 1e-12
    assert abs(forget - 0.2) <= 1e-12


def test_improving_task_contributes_negative_term():
    # Task 1 improves monotonically: its max over earlier rows is 0.6 and the
    # final value is 0.7, so it contributes -0.1; task 2 drops 0.9 -> 0.5.
    m = _matrix([[0.5], [0.6, 0.9], [0.7, 0.5, 0.8]])
    _, forget = compute_metrics(m)
    assert abs(forget - ((0.6 - 0.7) + (0.9 - 0.5)) / 2.0) <= 1e-12


def test_single_task_forgetting_undefined():
    m = _matrix([[0.9]])
    assert avg_accuracy(m) == 0.9
    with pytest.raises(UsageError):
        compute_metrics(m)


def test_incomplete_matrix_rejected():
    m = AccuracyMatrix(n_tasks=3)
    m.add_row([0.5])
    with pytest.raises(UsageError):
        compute_metrics(m)


def test_row_shape_and_range_validated():
    m = AccuracyMatrix(n_tasks=2)
    with pytest.raises(UsageError):
        m.add_row([0.5, 0.5])
    with pytest.raises(UsageError):
        m.add_row([1.5])


def test_flat_roundtrip():
    m = _matrix([[0.1], [0.2, 0.3], [0.4, 0.5, 0.6]])
    restored = AccuracyMatrix.from_flat(m.flat())
    assert restored.rows == m.rows
    with pytest.raises(UsageError):
        AccuracyMatrix.from_flat([0.1, 0.2])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.floats(-0.2, 0.2))
def test_translation_covariance(n_tasks, seed, delta):
    rng = np.random.default_rng(seed)
    rows = [list(rng.uniform(0.3, 0.7, size=i + 1)) for i in range(n_tasks)]
    avg, forget = compute_metrics(_matrix(rows))
    shifted = [[a + delta for a in row] for row in rows]
    avg2, forget2 = compute_metrics(_matrix(shifted))
    assert abs((avg2 - avg) - delta) <= 1e-12
    assert abs(forget2 - forget) <= 1e-12
