import math

import numpy as np
import pytest

from ncnn.errors import ContractError, DomainError
from ncnn.labels import (NO_PAIN, PAIN, class_index, lsr_smooth, nfcs_hard_label, nfcs_sigmoid, nfcs_soft_label,
                         one_hot, target_distribution)


def test_class_order():
    assert class_index(NO_PAIN) == 0 and class_index(PAIN) == 1
    np.testing.assert_array_equal(one_hot(PAIN), [0.0, 1.0])
    with pytest.raises(ContractError):
        class_index("maybe")


@pytest.mark.parametrize("score", range(6))
def test_sigmoid_matches_direct_formula(score):
    assert abs(nfcs_sigmoid(score) - 1.0 / (1.0 + math.exp(-score + 2.5))) <= 1e-12


def test_sigmoid_worked_values():
    assert nfcs_sigmoid(3) == pytest.approx(0.6225, abs=1e-4)
    assert nfcs_sigmoid(2) == pytest.approx(0.3775, abs=1e-4)
    assert nfcs_sigmoid(2.5) == 0.5


def test_sigmoid_strictly_increasing():
    values = [nfcs_sigmoid(s) for s in range(6)]
    assert all(a < b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("score", [-1, 5.5, 6, True])
def test_sigmoid_domain(score):
    with pytest.raises(DomainError):
        nfcs_sigmoid(score)


@pytest.mark.parametrize("score", range(6))
def test_soft_label_complement(score):
    dist = nfcs_soft_label(score)
    s = nfcs_sigmoid(score)
    assert dist[1] == s and dist[0] == 1.0 - s


def test_hard_label_cutoff():
    assert [nfcs_hard_label(s) for s in range(6)] == [NO_PAIN] * 3 + [PAIN] * 3


def test_lsr_worked_example_exact():
    np.testing.assert_array_equal(lsr_smooth(PAIN, 0.2), [0.1, 0.9])
    np.testing.assert_array_equal(lsr_smooth(NO_PAIN, 0.2), [0.9, 0.1])


def test_lsr_zero_is_one_hot():
    np.testing.assert_array_equal(lsr_smooth(PAIN, 0.0), one_hot(PAIN))


@pytest.mark.parametrize("eps", [0.1, 0.3, 0.5, 0.99])
def test_lsr_sums_to_one(eps):
    assert lsr_smooth(PAIN, eps).sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("eps", [-0.1, 1.0, 1.5])
def test_lsr_epsilon_range(eps):
    with pytest.raises(ContractError):
        lsr_smooth(PAIN, eps)


def test_target_distribution_modes():
    np.testing.assert_array_equal(target_distribution(PAIN, 4, "hard"), [0, 1])
    np.testing.assert_array_equal(target_distribution(PAIN, 4, "lsr", 0.2), [0.1, 0.9])
    np.testing.assert_array_equal(target_distribution(PAIN, 4, "nfcs_soft"), nfcs_soft_label(4))
    with pytest.raises(ContractError):
        target_distribution(PAIN, None, "nfcs_soft")
    with pytest.raises(ContractError):
        target_distribution(PAIN, 4, "fuzzy")
