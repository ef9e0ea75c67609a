import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cctraj import ConfigurationError
from cctraj.noise import (
    Gaussian, GaussianMixture, UniformBox, build_dataset, distribution_from_dict, dubins_mixture_case,
    dubins_uniform_case, fit_gaussian_mle, load_dataset, sample, save_dataset, substream,
)


def test_degenerate_box_is_constant(rng):
    box = UniformBox([0.3, -1.0], [0.3, -1.0])
    np.testing.assert_array_equal(box.sample_n(rng, 50), np.tile([0.3, -1.0], (50, 1)))


def test_uniform_case_bounds(rng):
    W = dubins_uniform_case(0.15).sample_n(rng, 20000)
    assert np.all(np.abs(W) <= 0.15)
    assert np.all(np.abs(W[:, :2]) <= 0.03)
    # the box is actually filled, not just bounded
    assert np.abs(W[:, 2]).max() > 0.149


def test_mixture_mean_is_zero(rng):
    W = dubins_mixture_case().sample_n(rng, 100_000)
    sd = W.std(axis=0)
    assert np.all(np.abs(W.mean(axis=0)) <= 3 * sd / np.sqrt(W.shape[0]))


def test_mixture_component_frequencies(rng):
    W = dubins_mixture_case().sample_n(rng, 50_000)
    # components are separated by 10 standard deviations
    frac = [np.mean(W[:, 0] < -0.25), np.mean(np.abs(W[:, 0]) < 0.25), np.mean(W[:, 0] > 0.25)]
    np.testing.assert_allclose(frac, [0.1, 0.8, 0.1], atol=0.01)


def test_invalid_distributions():
    with pytest.raises(ConfigurationError):
        UniformBox([1.0], [0.0])
    with pytest.raises(ConfigurationError):
        Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ConfigurationError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ConfigurationError):
        distribution_from_dict({"type": "laplace"})


def test_describe_round_trip(rng):
    for dist in (dubins_uniform_case(), dubins_mixture_case(), Gaussian([1.0, 2.0], np.diag([0.5, 2.0]))):
        again = distribution_from_dict(dist.describe())
        np.testing.assert_array_equal(again.sample_n(substream(3), 10), dist.sample_n(substream(3), 10))


def test_single_sample_shape(rng):
    assert sample(dubins_mixture_case(), rng).shape == (4,)


def test_dataset_shape_and_determinism():
    ds = build_dataset(dubins_uniform_case(), 20, 200, seed=7)
    assert ds.samples.shape == (20, 200, 4)
    again = build_dataset(dubins_uniform_case(), 20, 200, seed=7)
    np.testing.assert_array_equal(ds.samples, again.samples)
    other = build_dataset(dubins_uniform_case(), 20, 200, seed=8)
    assert np.any(ds.samples != other.samples)


def test_dataset_prefix_is_stable():
    # sequence j does not depend on how many sequences are drawn
    small = build_dataset(dubins_mixture_case(), 3, 10, seed=1)
    large = build_dataset(dubins_mixture_case(), 9, 10, seed=1)
    np.testing.assert_array_equal(small.samples, large.samples[:3])


def test_dataset_file_round_trip(tmp_path):
    ds = build_dataset(dubins_mixture_case(), 4, 6, seed=11)
    save_dataset(ds, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.samples, ds.samples)
    assert back.seed == 11


def test_mle_hand_cases():
    fit = fit_gaussian_mle(np.array([[-1.0], [1.0]]), regularize=0.0)
    assert fit.mean[0] == 0.0
    assert fit.cov[0, 0] == pytest.approx(1.0)
    const = fit_gaussian_mle(np.full((10, 2), 0.4))
    np.testing.assert_allclose(const.mean, [0.4, 0.4])
    assert np.all(np.linalg.eigvalsh(const.cov) > 0)


def test_mle_recovers_uniform_variance(rng):
    fit = fit_gaussian_mle(dubins_uniform_case(0.15).sample_n(rng, 100_000))
    np.testing.assert_allclose(np.diag(fit.cov)[2:], 0.15**2 / 3, rtol=0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_box_samples_stay_inside(seed, n):
    box = UniformBox([-1.0, 0.0, 2.0], [1.0, 0.5, 2.5])
    W = box.sample_n(substream(seed), n)
    assert np.all((W >= box.lo) & (W <= box.hi))
