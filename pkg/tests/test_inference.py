import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probstereo.data_io import SynthParams, synth_stereogram
from probstereo.inference import (
    UncertainDisparity,
    aggregate_predictions,
    convergence_analysis,
    mc_predict,
    pass_generators,
    uncertainty_stddev_maps,
)
from probstereo.network import NetworkConfig, ProbGCNet
from probstereo.variational import set_posterior_stddev


def brute_force(ds, variances):
    """Per-pixel loops straight from the mean / variance-sum definitions."""
    T, h, w = ds.shape
    mean = np.zeros((h, w))
    epi = np.zeros((h, w))
    alea = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            m = sum(float(ds[t, y, x]) for t in range(T)) / T
            mean[y, x] = m
            epi[y, x] = sum((float(ds[t, y, x]) - m) ** 2 for t in range(T)) / T
            alea[y, x] = sum(float(variances[t, y, x]) for t in range(T)) / T
    return mean, epi, alea


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return ProbGCNet(NetworkConfig(max_disparity=16, feature_channels=4, residual_blocks=1, volume_channels=(4, 4, 4)))


@pytest.fixture(scope="module")
def sample():
    return synth_stereogram(SynthParams(), np.random.default_rng(0))


def test_aggregation_two_draw_example():
    ds = np.array([4.0, 6.0]).reshape(2, 1, 1)
    s = np.log(np.array([1.0, 3.0])).reshape(2, 1, 1)
    u = aggregate_predictions(ds, s)
    assert u.mean_disparity.item() == pytest.approx(5.0)
    assert u.epistemic_var.item() == pytest.approx(1.0)
    assert u.aleatoric_var.item() == pytest.approx(2.0)
    assert u.combined_var.item() == pytest.approx(3.0)


@settings(max_examples=25, deadline=None)
@given(
    ds=arrays(np.float64, (5, 3, 4), elements=st.floats(0, 64)),
    s=arrays(np.float64, (5, 3, 4), elements=st.floats(-6, 6)),
)
def test_aggregation_matches_brute_force(ds, s):
    u = aggregate_predictions(ds, s)
    mean, epi, alea = brute_force(ds, np.exp(s))
    np.testing.assert_allclose(u.mean_disparity, mean, atol=1e-6)
    np.testing.assert_allclose(u.epistemic_var, epi, atol=1e-6)
    np.testing.assert_allclose(u.aleatoric_var, alea, atol=1e-6)
    assert np.array_equal(u.combined_var, u.epistemic_var + u.aleatoric_var)
    assert (u.epistemic_var >= 0).all() and (u.aleatoric_var > 0).all()


def test_single_pass_has_zero_epistemic():
    u = aggregate_predictions(np.random.rand(1, 4, 4), np.random.rand(1, 4, 4))
    assert np.all(u.epistemic_var == 0)
    assert np.array_equal(u.combined_var, u.aleatoric_var)


def test_stddev_maps():
    u = UncertainDisparity(np.zeros(3), np.array([0.0, 4.0, 9.0]), np.array([1.0, 0.0, 0.0]), np.array([1.0, 4.0, 9.0]), 2)
    alea, epi, comb = uncertainty_stddev_maps(u)
    np.testing.assert_allclose(comb, [1.0, 2.0, 3.0])
    assert epi[0] == 0.0
    u.aleatoric_var = np.array([4.41])
    assert uncertainty_stddev_maps(u)[0].item() == pytest.approx(2.10)


def test_pass_generators_reproducible_and_distinct():
    a = [g.initial_seed() for g in pass_generators(3, 5)]
    b = [g.initial_seed() for g in pass_generators(3, 5)]
    assert a == b and len(set(a)) == 5


def test_mc_predict_rejects_bad_T(net, sample):
    with pytest.raises(ValueError):
        mc_predict(net, sample.left, sample.right, T=0)


def test_mc_predict_degenerate_posterior(sample):
    torch.manual_seed(0)
    m = ProbGCNet(NetworkConfig(max_disparity=16, feature_channels=4, residual_blocks=1, volume_channels=(4, 4, 4)))
    set_posterior_stddev(m, 1e-30, freeze=True)
    u = mc_predict(m, sample.left, sample.right, T=5, seed=1)
    assert u.epistemic_var.max() <= 1e-10


def test_mc_predict_reproducible_and_shaped(net, sample):
    a = mc_predict(net, sample.left, sample.right, T=3, seed=7)
    b = mc_predict(net, sample.left, sample.right, T=3, seed=7)
    assert a.mean_disparity.shape == sample.shape
    assert np.array_equal(a.mean_disparity, b.mean_disparity)
    assert np.array_equal(a.combined_var, b.combined_var)
    assert a.T == 3


def test_mc_predict_T1(net, sample):
    u = mc_predict(net, sample.left, sample.right, T=1, seed=0)
    assert np.all(u.epistemic_var == 0)


def test_convergence_deterministic_model(sample):
    torch.manual_seed(0)
    m = ProbGCNet(NetworkConfig(max_disparity=16, feature_channels=4, residual_blocks=1, volume_channels=(4, 4, 4)))
    set_posterior_stddev(m, 1e-30, freeze=True)
    rows = convergence_analysis(m, [sample], [1, 3], repeats=3)
    assert [r.T for r in rows] == [1, 3]
    assert all(r.mean_stddev < 1e-6 for r in rows)


def test_convergence_table_monotone(net, sample):
    rows = convergence_analysis(net, [sample], [1, 10, 50], repeats=4, seed=2)
    assert len(rows) == 3
    for a, b in zip(rows, rows[1:]):
        assert b.mean_stddev <= a.mean_stddev + 2 * np.hypot(a.std_error, b.std_error)


def test_convergence_argument_errors(net, sample):
    with pytest.raises(ValueError):
        convergence_analysis(net, [sample], [], repeats=3)
    with pytest.raises(ValueError):
        convergence_analysis(net, [sample], [1], repeats=1)


def test_law_of_large_numbers(net, sample):
    a = mc_predict(net, sample.left, sample.right, T=50, seed=1).mean_disparity
    b = mc_predict(net, sample.left, sample.right, T=50, seed=2).mean_disparity
    singles = [mc_predict(net, sample.left, sample.right, T=1, seed=s).mean_disparity for s in (3, 4)]
    ratio = np.abs(a - b).mean() / np.abs(singles[0] - singles[1]).mean()
    assert ratio < 0.5
