import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedca.numcore import (BadLabel, BadTemperature, NonFiniteLoss, ZeroRow, cosine_similarity,
                           finite_difference_check, l2_normalize_rows, softmax_cross_entropy)


def brute_cross_entropy(logits, labels, t):
    total = 0.0
    for row, y in zip(logits, labels):
        denom = sum(math.exp(v / t) for v in row)
        total += -math.log(math.exp(row[y] / t) / denom)
    return total / len(labels)


def test_normalize_examples():
    np.testing.assert_allclose(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]])
    np.testing.assert_array_equal(l2_normalize_rows([[1.0, 0.0, 0.0]]), [[1.0, 0.0, 0.0]])
    with pytest.raises(ZeroRow):
        l2_normalize_rows([[0.0, 0.0]])


@given(arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)))
def test_normalized_rows_have_unit_norm(m):
    if np.any(np.linalg.norm(m, axis=1) <= 1e-6):
        return
    out = l2_normalize_rows(m)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_cosine_symmetric_and_self_is_one(seed):
    rng = np.random.default_rng(seed)
    u, v = l2_normalize_rows(rng.standard_normal((2, 6)))
    assert cosine_similarity(u, v) == cosine_similarity(v, u)
    assert abs(cosine_similarity(u, u) - 1.0) <= 1e-12
    assert cosine_similarity(u, v) < 1.0


def test_cross_entropy_examples():
    # Values computed by the direct formula log(1 + e^{-1/t}).
    loss, _ = softmax_cross_entropy([[1.0, 0.0]], [0], 1.0)
    assert loss == pytest.approx(0.31326168751822286, abs=1e-12)
    assert loss == pytest.approx(brute_cross_entropy([[1.0, 0.0]], [0], 1.0), abs=1e-14)
    loss, _ = softmax_cross_entropy([[1.0, 0.0]], [0], 0.5)
    assert loss == pytest.approx(0.12692801104297263, abs=1e-12)
    for c in (-5.0, 0.0, 17.0):
        assert softmax_cross_entropy([[c]], [0])[0] == 0.0


def test_cross_entropy_errors():
    with pytest.raises(BadLabel):
        softmax_cross_entropy([[1.0, 2.0]], [2])
    with pytest.raises(BadLabel):
        softmax_cross_entropy([[1.0, 2.0]], [-1])
    with pytest.raises(BadTemperature):
        softmax_cross_entropy([[1.0, 2.0]], [0], 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_matches_brute_force_and_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 7))
    labels = rng.integers(0, 7, 5)
    t = 0.7
    loss, grad = softmax_cross_entropy(logits, labels, t)
    assert loss == pytest.approx(brute_cross_entropy(logits, labels, t), abs=1e-12)
    err = finite_difference_check(
        lambda v: softmax_cross_entropy(v.reshape(5, 7), labels, t)[0],
        lambda v: softmax_cross_entropy(v.reshape(5, 7), labels, t)[1].reshape(-1),
        logits.reshape(-1), eps=1e-6)
    assert err < 1e-6


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_cross_entropy_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, 4))
    labels = rng.integers(0, 4, 3)
    a, _ = softmax_cross_entropy(logits, labels, 0.5)
    b, _ = softmax_cross_entropy(logits + shift, labels, 0.5)
    assert abs(a - b) < 1e-10


def test_cross_entropy_is_stable_for_huge_logits():
    loss, grad = softmax_cross_entropy([[1e4, 0.0, -1e4]], [1], 0.1)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_finite_difference_check_examples():
    quad = finite_difference_check(lambda v: float(v @ v), lambda v: 2 * v, np.array([1.0, 2.0]), eps=1e-5)
    assert quad < 1e-6
    const = finite_difference_check(lambda v: 3.0, lambda v: np.zeros_like(v), np.array([1.0, 2.0]), eps=1e-5)
    assert const == 0.0


def test_finite_difference_check_flags_wrong_gradient_and_nan():
    assert finite_difference_check(lambda v: float(v @ v), lambda v: v, np.array([1.0, 2.0])) > 0.1
    with pytest.raises(NonFiniteLoss):
        finite_difference_check(lambda v: float("nan"), lambda v: np.zeros_like(v), np.array([1.0]))
    with pytest.raises(ValueError):
        finite_difference_check(lambda v: 0.0, lambda v: v, np.array([1.0]), eps=0.1)


def test_finite_difference_check_samples_coordinates():
    calls = []

    def loss(v):
        calls.append(1)
        return float(v @ v)

    finite_difference_check(loss, lambda v: 2 * v, np.arange(100.0), max_coords=10)
    assert len(calls) == 20
