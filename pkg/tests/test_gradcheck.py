import numpy as np
import pytest

from dpcn import functional as F
from dpcn.autograd import Tensor
from dpcn.gradcheck import finite_difference_check, numerical_gradient, relative_error


def test_sum_has_zero_error(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert finite_difference_check(lambda t: t.sum(), x) < 1e-9


def test_half_square_matches_to_rounding():
    x = Tensor(np.array([1.0, 2.0]))
    fn = lambda t: (t * t).sum() * 0.5
    assert finite_difference_check(fn, x, h=1e-5) < 1e-8
    np.testing.assert_allclose(numerical_gradient(fn, x), [1.0, 2.0], atol=1e-8)


def test_softmax_ce_pipeline(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert finite_difference_check(lambda t: F.softmax_cross_entropy(t, [0, 2]), x) < 1e-4


def test_non_finite_output_rejected():
    x = Tensor(np.array([0.0]))
    with pytest.raises(ValueError), np.errstate(divide="ignore"):
        finite_difference_check(lambda t: t.log().sum(), x)


def test_non_scalar_output_rejected():
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: t * 2.0, Tensor(np.ones(2)))


def test_bad_step_rejected():
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: t.sum(), Tensor(np.ones(2)), h=0.0)


def test_relative_error_definition():
    np.testing.assert_allclose(relative_error(np.array([1.5, 10.5]), np.array([1.0, 10.0])),
                               [0.5, 0.05])


def test_numerical_gradient_restores_input(rng):
    x = Tensor(rng.normal(size=5))
    before = x.data.copy()
    numerical_gradient(lambda t: (t * t).sum(), x)
    np.testing.assert_array_equal(x.data, before)
