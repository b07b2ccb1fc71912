import numpy as np
import pytest

from twophase import SmootherError, smooth_conditional_mean
from twophase.smoothers import rule_of_thumb_bandwidth


def test_local_linear_reproduces_linear_functions():
    # a local-linear fit is exact on data lying on a line
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, 300)
    y = 2.0 + 3.0 * x
    w = rng.uniform(0.5, 2.0, 300)
    pts = np.linspace(-1.5, 1.5, 11)
    fitted = smooth_conditional_mean(x[:, None], y, w, pts[:, None],
                                     discrete_mask=[False])
    assert fitted == pytest.approx(2.0 + 3.0 * pts, abs=1e-7)


def test_local_linear_two_dimensional_plane():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(400, 2))
    y = 1.0 - 2.0 * X[:, 0] + 0.5 * X[:, 1]
    pts = rng.uniform(-0.5, 0.5, size=(20, 2))
    fitted = smooth_conditional_mean(X, y, np.ones(400), pts,
                                     discrete_mask=[False, False])
    truth = 1.0 - 2.0 * pts[:, 0] + 0.5 * pts[:, 1]
    assert fitted == pytest.approx(truth, abs=1e-7)


def test_smooth_recovers_conditional_mean_curve():
    rng = np.random.default_rng(2)
    m = 4000
    x = rng.uniform(-2, 2, m)
    y = np.sin(x) + 0.3 * rng.standard_normal(m)
    pts = np.linspace(-1.5, 1.5, 9)
    fitted = smooth_conditional_mean(x[:, None], y, np.ones(m), pts[:, None])
    assert np.max(np.abs(fitted - np.sin(pts))) < 0.06


def test_discrete_columns_use_exact_group_means():
    z = np.array([0.0, 0.0, 1.0, 1.0, 1.0])
    y = np.array([1.0, 3.0, 10.0, 20.0, 30.0])
    w = np.array([1.0, 1.0, 1.0, 2.0, 1.0])
    pts = np.array([[0.0], [1.0]])
    fitted = smooth_conditional_mean(z[:, None], y, w, pts)
    assert fitted[0] == pytest.approx(2.0)
    assert fitted[1] == pytest.approx((10 + 40 + 30) / 4.0)


def test_mixed_discrete_and_continuous():
    rng = np.random.default_rng(3)
    m = 2000
    group = rng.integers(0, 2, m).astype(float)
    x = rng.uniform(-1, 1, m)
    y = np.where(group == 1, 5.0 + x, -1.0 - 2.0 * x)
    train = np.column_stack([x, group])
    pts = np.array([[0.5, 1.0], [0.5, 0.0], [-0.25, 1.0]])
    fitted = smooth_conditional_mean(train, y, np.ones(m), pts)
    assert fitted == pytest.approx([5.5, -2.0, 4.75], abs=1e-6)


def test_multiple_responses_share_kernels():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, 500)
    r1 = 1.0 + x
    r2 = 4.0 - 2.0 * x
    pts = np.array([[0.3], [0.7]])
    both = smooth_conditional_mean(x[:, None], np.column_stack([r1, r2]),
                                   np.ones(500), pts)
    one = smooth_conditional_mean(x[:, None], r1, np.ones(500), pts)
    assert both[:, 0] == pytest.approx(one, abs=1e-12)
    assert both[:, 1] == pytest.approx(4.0 - 2.0 * pts[:, 0], abs=1e-7)


def test_zero_variance_column_raises():
    with pytest.raises(SmootherError):
        rule_of_thumb_bandwidth(np.ones(50))
    x = np.full((50, 1), 2.0)
    with pytest.raises(SmootherError):
        smooth_conditional_mean(x, np.arange(50.0), np.ones(50), x[:5],
                                discrete_mask=[False])


def test_unseen_category_level_raises():
    z = np.array([0.0, 0.0, 1.0, 1.0])
    y = np.array([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(SmootherError):
        smooth_conditional_mean(z[:, None], y, np.ones(4), np.array([[2.0]]))
