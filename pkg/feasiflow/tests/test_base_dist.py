import math

import numpy as np
import pytest
from scipy import integrate, stats

from feasiflow.app.base_dist import (
    BaseKind,
    GaussianBase,
    ResamplingBase,
    build_resampling_base,
    gaussian_log_prob,
    gaussian_sample,
    make_base,
    resampling_init_Z,
    resampling_log_prob,
    resampling_sample,
    resampling_update_Z,
)
from feasiflow.app.errors import BaseStateError, ShapeError
from feasiflow.app.nn_core import Activation, DenseLayer, DenseNet, init_dense_net


def constant_accept_net(dim, logit):
    """accept_net whose output is expit(logit) everywhere."""
    return DenseNet([DenseLayer(np.zeros((1, dim)), np.array([float(logit)]), Activation.SIGMOID)])


def random_base(dim, seed, truncation=100, z_ema=1.0, ema_decay=0.95):
    rng = np.random.default_rng(seed)
    net = init_dense_net(dim, 8, 3, 1, rng, output_activation=Activation.SIGMOID)
    for layer in net.layers:
        layer.bias[...] = rng.normal(scale=0.5, size=layer.bias.shape)
    return ResamplingBase(dim, net, truncation=truncation, z_ema=z_ema, ema_decay=ema_decay)


# ============================================================================
# GAUSSIAN
# ============================================================================

def test_gaussian_closed_forms():
    assert gaussian_log_prob(np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert gaussian_log_prob(np.array([1.0])) == pytest.approx(-1.4189385332, abs=1e-10)


def test_gaussian_matches_coordinatewise_pdf(rng):
    z = rng.standard_normal((20, 5)) * 2.0
    expected = np.sum(stats.norm.logpdf(z), axis=1)
    np.testing.assert_allclose(gaussian_log_prob(z), expected, rtol=0, atol=1e-12)


def test_gaussian_sampling_is_seeded():
    np.testing.assert_array_equal(gaussian_sample(3, 5, seed=7), gaussian_sample(3, 5, seed=7))
    assert not np.array_equal(gaussian_sample(3, 1, seed=7), gaussian_sample(3, 1, seed=8))
    with pytest.raises(ShapeError):
        gaussian_sample(3, 0, seed=1)


def test_gaussian_sample_moments():
    n = 1_000_000
    x = gaussian_sample(1, n, seed=3)[:, 0]
    assert abs(x.mean()) < 4 / math.sqrt(n)
    assert abs(x.var() - 1.0) < 0.01


def test_gaussian_base_backward_is_minus_z():
    base = GaussianBase(3)
    z = np.array([[1.0, -2.0, 0.5]])
    _, dz, grads = base.log_prob_backward(z, np.array([1.0]))
    np.testing.assert_array_equal(dz, -z)
    assert grads == []


# ============================================================================
# RESAMPLING DENSITY
# ============================================================================

@pytest.mark.parametrize("truncation", [1, 5, 100])
def test_full_acceptance_reduces_to_gaussian(rng, truncation):
    base = ResamplingBase(2, constant_accept_net(2, 800.0), truncation=truncation, z_ema=1.0)
    z = rng.standard_normal((10, 2))
    np.testing.assert_array_equal(resampling_log_prob(base, z), gaussian_log_prob(z))


def test_single_trial_reduces_to_gaussian(rng):
    base = random_base(2, seed=1, truncation=1, z_ema=0.37)
    z = rng.standard_normal((10, 2))
    np.testing.assert_array_equal(resampling_log_prob(base, z), gaussian_log_prob(z))


@pytest.mark.parametrize("z_norm", [0.2, 0.55, 0.9])
def test_two_trial_density_by_hand(z_norm):
    base = random_base(2, seed=2, truncation=2, z_ema=z_norm)
    for point in ([0.0, 0.0], [1.0, -0.5], [-2.0, 0.3]):
        z = np.array(point)
        alpha = base.acceptance(z[None, :])[0]
        # one rejectable trial, then forced acceptance: p = [a/Z * (1 - (1 - Z)) + (1 - Z)] N
        expected = math.log(alpha + (1.0 - z_norm)) + gaussian_log_prob(z)
        assert resampling_log_prob(base, z) == pytest.approx(expected, abs=1e-12)


def test_log_prob_needs_positive_normalizer():
    base = random_base(2, seed=3)
    base.z_ema = 0.0
    with pytest.raises(BaseStateError):
        resampling_log_prob(base, np.zeros(2))


def test_accept_net_must_end_in_sigmoid(rng):
    with pytest.raises(ShapeError):
        ResamplingBase(2, init_dense_net(2, 4, 2, 1, rng))
    with pytest.raises(BaseStateError):
        ResamplingBase(2, constant_accept_net(2, 0.0), truncation=0)


def test_backward_matches_finite_differences(rng):
    base = random_base(3, seed=4, truncation=10, z_ema=0.6)
    z = rng.standard_normal((4, 3))
    cot = rng.standard_normal(4)
    _, dz, _ = base.log_prob_backward(z, cot)
    step = 1e-6
    fd = np.empty_like(z)
    for idx in np.ndindex(*z.shape):
        plus, minus = z.copy(), z.copy()
        plus[idx] += step
        minus[idx] -= step
        fd[idx] = (np.dot(base.log_prob(plus), cot) - np.dot(base.log_prob(minus), cot)) / (2 * step)
    np.testing.assert_allclose(dz, fd, rtol=1e-5, atol=1e-8)


@pytest.mark.slow
def test_resampling_density_integrates_to_one():
    base = random_base(2, seed=5, truncation=100)
    resampling_init_Z(base, n_mc=1_000_000, seed=11)
    grid = np.arange(-8.0, 8.0 + 1e-9, 0.05)
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    density = np.exp(resampling_log_prob(base, points, exact=False)).reshape(xx.shape)
    integral = np.trapezoid(np.trapezoid(density, grid, axis=1), grid)
    assert 0.98 <= integral <= 1.02


# ============================================================================
# NORMALIZER TRACKING
# ============================================================================

def test_constant_acceptance_with_no_memory():
    base = ResamplingBase(2, constant_accept_net(2, 0.0), z_ema=1.0, ema_decay=0.0)
    assert resampling_update_Z(base, n_mc=64, seed=0) == 0.5
    assert base.z_ema == 0.5


def test_frozen_average_does_not_move():
    base = random_base(2, seed=6, z_ema=0.42, ema_decay=1.0)
    assert resampling_update_Z(base, n_mc=64, seed=0) == 0.42


def test_normalizer_is_clamped():
    base = ResamplingBase(2, constant_accept_net(2, -800.0), z_ema=1.0, ema_decay=0.0)
    assert resampling_update_Z(base, n_mc=16, seed=0) == pytest.approx(1e-6)


def test_repeated_updates_converge_to_monte_carlo_estimate():
    base = random_base(2, seed=7, z_ema=1.0, ema_decay=0.95)
    for step in range(300):
        resampling_update_Z(base, n_mc=1024, seed=step)
    direct = float(np.mean(base.acceptance(gaussian_sample(2, 1_000_000, seed=99), exact=False)))
    assert abs(base.z_ema - direct) / direct < 0.02


def test_init_sets_estimate_directly():
    base = random_base(2, seed=8, z_ema=1.0)
    z0 = resampling_init_Z(base, n_mc=4096, seed=1)
    expected = float(np.mean(base.acceptance(gaussian_sample(2, 4096, seed=1), exact=False)))
    assert z0 == pytest.approx(expected, abs=1e-15)


# ============================================================================
# SAMPLING
# ============================================================================

def test_full_acceptance_returns_gaussian_stream():
    base = ResamplingBase(3, constant_accept_net(3, 800.0), truncation=50)
    np.testing.assert_array_equal(resampling_sample(base, 20, seed=5), gaussian_sample(3, 20, seed=5))


def test_single_trial_returns_gaussian_stream():
    base = random_base(3, seed=9, truncation=1)
    np.testing.assert_array_equal(resampling_sample(base, 20, seed=5), gaussian_sample(3, 20, seed=5))


def test_sampling_is_seeded():
    base = random_base(2, seed=10, truncation=20)
    np.testing.assert_array_equal(resampling_sample(base, 100, seed=2), resampling_sample(base, 100, seed=2))


@pytest.mark.slow
def test_sampler_matches_density_histogram():
    base = random_base(1, seed=12, truncation=3)

    def accept(t):
        return float(base.acceptance(np.array([[t]]))[0])

    def density(t):
        return math.exp(resampling_log_prob(base, np.array([t])))

    z_true, _ = integrate.quad(lambda t: accept(t) * stats.norm.pdf(t), -np.inf, np.inf)
    base.z_ema = z_true

    n = 1_000_000
    samples = resampling_sample(base, n, seed=4, exact=False)[:, 0]
    edges = np.concatenate([[-np.inf], np.linspace(-4.0, 4.0, 33), [np.inf]])
    observed = np.histogram(samples, bins=edges)[0]
    expected = np.array([integrate.quad(density, lo, hi)[0] for lo, hi in zip(edges[:-1], edges[1:])])
    expected *= n / expected.sum()
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_make_base_kinds(rng):
    assert isinstance(make_base(BaseKind.GAUSSIAN, 3), GaussianBase)
    base = make_base("resampling", 3, rng=rng, width=4, hidden_layers=1)
    assert isinstance(base, ResamplingBase) and base.accept_net.output_dim == 1
    with pytest.raises(BaseStateError):
        make_base(BaseKind.RESAMPLING, 3)
    assert isinstance(build_resampling_base(2, rng), ResamplingBase)
