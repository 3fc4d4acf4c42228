import numpy as np
import pytest
from scipy import stats

from ppfl.privacy import (DEFAULT_EPSILONS, DpConfig, laplace_from_uniform, laplace_sample, laplace_scale,
                          noise_update, parse_epsilon)


def test_scale_for_default_clip():
    assert laplace_scale(200.0, 10.0) == 40.0
    assert DpConfig(10.0, 200.0).scale == 40.0


def test_default_sweep_grid():
    assert DEFAULT_EPSILONS == (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)


@pytest.mark.parametrize("value", ["off", "OFF", None, "none", "inf"])
def test_epsilon_off(value):
    assert parse_epsilon(value) is None
    assert not DpConfig(value).enabled and DpConfig(value).scale is None


@pytest.mark.parametrize("value", [0, -1, "0", "-2.5", float("nan"), "abc"])
def test_epsilon_rejected(value):
    with pytest.raises(ValueError):
        parse_epsilon(value)


def test_nonpositive_scale_rejected():
    with pytest.raises(ValueError):
        laplace_sample(0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        laplace_from_uniform(0.1, -1.0)


def test_median_maps_to_zero():
    assert laplace_from_uniform(0.0, 40.0) == 0.0


def test_inverse_cdf_values():
    # P(X <= x) = 1 - exp(-x/b)/2 for x > 0; u = 1/4 gives x = b ln 2
    assert laplace_from_uniform(0.25, 3.0) == pytest.approx(3.0 * np.log(2.0), rel=1e-15)
    assert laplace_from_uniform(-0.25, 3.0) == pytest.approx(-3.0 * np.log(2.0), rel=1e-15)


def test_open_interval_enforced():
    with pytest.raises(ValueError):
        laplace_from_uniform(0.5, 1.0)


def test_moments():
    x = laplace_sample(40.0, np.random.default_rng(11), size=1_000_000)
    assert abs(x.mean()) < 0.2
    assert abs(x.var() / 3200.0 - 1.0) < 0.02


@pytest.mark.parametrize("b", [1.0, 40.0, 4000.0])
def test_ks_against_analytic_cdf(b):
    x = laplace_sample(b, np.random.default_rng(int(b)), size=100_000)
    assert stats.kstest(x, stats.laplace(scale=b).cdf).pvalue > 0.01


def test_samples_are_finite_at_extreme_uniforms():
    u = np.array([-0.5 + 2**-53, 0.5 - 2**-53])
    assert np.all(np.isfinite(laplace_from_uniform(u, 1.0)))


def test_off_is_bitwise_identity_copy():
    d = np.random.default_rng(0).normal(size=7)
    out = noise_update(d, DpConfig(None), np.random.default_rng(1))
    assert np.array_equal(out, d) and out is not d


def test_huge_epsilon_is_nearly_noiseless():
    d = np.zeros(1000)
    out = noise_update(d, DpConfig(1e12), np.random.default_rng(2))
    assert np.all(np.abs(out) <= 1e-6)


def test_reproducible_with_fixed_seed():
    d = np.ones(50)
    a = noise_update(d, DpConfig(1.0), np.random.default_rng(5))
    b = noise_update(d, DpConfig(1.0), np.random.default_rng(5))
    assert np.array_equal(a, b) and not np.array_equal(a, d)


def test_input_not_modified():
    d = np.ones(10)
    noise_update(d, DpConfig(1.0), np.random.default_rng(0))
    assert np.array_equal(d, np.ones(10))
