import csv
import io

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import pearsonr

from mmfspeckle.metrics import (
    REPORT_COLUMNS,
    ConstantInputError,
    EvalReport,
    classification_success,
    jaccard_batch,
    jaccard_index,
    pearson_masked,
    pearson_rows,
    pixel_accuracy,
    reports_to_csv,
    summarize,
)

masks = arrays(np.uint8, (5, 6), elements=st.integers(0, 1))
images = arrays(np.float64, (6, 6), elements=st.floats(-100, 100, allow_nan=False))


def test_pixel_accuracy_examples():
    a = np.array([[1, 0], [1, 1]])
    assert pixel_accuracy(a, a) == 1.0
    assert pixel_accuracy(a, 1 - a) == 0.0
    assert pixel_accuracy(a, np.array([[1, 0], [1, 0]])) == 0.75
    with pytest.raises(ValueError):
        pixel_accuracy(a, np.zeros((3, 2)))


def test_jaccard_examples():
    a = np.array([[1, 1], [0, 0]])
    b = np.array([[0, 1], [0, 1]])
    assert jaccard_index(a, a) == 1.0
    assert jaccard_index(a, 1 - a) == 0.0
    assert jaccard_index(a, b) == pytest.approx(1 / 3)
    assert jaccard_index(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ValueError):
        jaccard_index(a, np.zeros(4))


@given(a=masks, b=masks)
def test_jaccard_properties(a, b):
    j = jaccard_index(a, b)
    assert 0 <= j <= 1
    assert j == jaccard_index(b, a)
    if a.any() or b.any():
        assert (j == 1.0) == np.array_equal(a, b)
    assert jaccard_batch(a[None], b[None])[0] == pytest.approx(j)


def test_pearson_examples():
    x = np.array([1.0, 2.0, 3.0])
    assert pearson_masked(x, x) == pytest.approx(1.0)
    assert pearson_masked(x, -x + 5) == pytest.approx(-1.0)
    y = np.array([1.0, 2.0, 4.0])
    assert pearson_masked(x, y) == pytest.approx(pearsonr(x, y).statistic, abs=1e-14)
    # closed form for this pair: 3 / sqrt(2 * 14/3)
    assert pearson_masked(x, y) == pytest.approx(3 / np.sqrt(2 * 14 / 3), abs=1e-14)


def test_pearson_mask_selects_pixels():
    x = np.array([[1.0, 2.0], [3.0, 100.0]])
    y = np.array([[2.0, 4.0], [6.0, -50.0]])
    mask = np.array([[True, True], [True, False]])
    assert pearson_masked(x, y, mask) == pytest.approx(1.0)


def test_pearson_errors():
    with pytest.raises(ConstantInputError):
        pearson_masked(np.ones(4), np.arange(4.0))
    with pytest.raises(ConstantInputError):
        pearson_masked(np.arange(4.0), np.arange(4.0), np.array([True, False, False, False]))
    with pytest.raises(ConstantInputError):
        pearson_rows(np.ones((1, 3)), np.ones((1, 3)))


@settings(max_examples=60)
@given(x=images, y=images, a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_pearson_invariance_and_symmetry(x, y, a, b):
    assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
    r = pearson_masked(x, y)
    assert -1 <= r <= 1
    assert abs(pearson_masked(y, x) - r) < 1e-12
    assert abs(pearson_masked(a * x + b, y) - r) < 1e-10


def test_pearson_rows_matches_scalar(rng):
    a = rng.standard_normal((4, 20))
    b = rng.standard_normal((4, 20))
    got = pearson_rows(a, b)
    assert np.allclose(got, [pearsonr(a[i], b[i]).statistic for i in range(4)], atol=1e-13)


def test_classification_success_examples():
    assert classification_success([1, 2, 3], [1, 2, 3]) == 1.0
    assert classification_success([1, 2, 3], [0, 0, 0]) == 0.0
    assert classification_success(np.arange(10), [0, 1, 2, 3, 4, 5, 6, 0, 0, 0]) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        classification_success([], [])


def test_summarize_perfect_reconstruction(rng):
    t = (rng.random((6, 4, 4)) < 0.4).astype(np.uint8)
    r = summarize("known", t, t, np.arange(6) % 10, np.arange(6) % 10)
    assert (r.accuracy_mean, r.jaccard_mean, r.classification_success) == (1.0, 1.0, 1.0)
    assert r.classification_error == 0.0


def test_report_csv_structure():
    rows = [("E5", EvalReport("known", 10, 0.9, 0.01, 0.5, 0.2, 0.8)),
            ("E5", EvalReport("unknown", 12, 0.88, 0.02, 0.47, 0.19, 0.7))]
    parsed = list(csv.DictReader(io.StringIO(reports_to_csv(rows))))
    assert list(parsed[0].keys()) == REPORT_COLUMNS
    assert [p["partition"] for p in parsed] == ["known", "unknown"]
    assert float(parsed[1]["classification_error"]) == pytest.approx(0.3)
