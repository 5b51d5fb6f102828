import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import finite_difference_check, relative_errors, tiny_config, tiny_model
from probstereo.errors import ConfigError, ShapeError
from probstereo.network import (
    NetworkConfig,
    ProbGCNet,
    aleatoric_map,
    build_cost_volume,
    forward_sample,
    normalize_image,
    pad_to_multiple,
    soft_argmin,
)
from probstereo.variational import set_posterior_stddev


def small_net(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(max_disparity=16, feature_channels=4, residual_blocks=1, volume_channels=(4, 4, 4))
    cfg.update(kw)
    return ProbGCNet(NetworkConfig(**cfg))


# soft argmin


def test_soft_argmin_uniform_costs():
    d = soft_argmin(torch.zeros(1, 4, 3, 5, dtype=torch.float64))
    assert torch.allclose(d, torch.full((1, 3, 5), 1.5, dtype=torch.float64))


@pytest.mark.parametrize(
    "costs, expected, tol",
    [([0.0, -1000.0, 0.0, 0.0], 1.0, 1e-6), ([10.0, -10.0, 10.0, 10.0], 1.0, 1e-3)],
)
def test_soft_argmin_peaked(costs, expected, tol):
    cost = torch.tensor(costs, dtype=torch.float64).view(1, 4, 1, 1)
    assert abs(soft_argmin(cost).item() - expected) < tol


def test_soft_argmin_direct_softmax_value():
    # brute-force expectation for [10, -10, 10, 10]
    w = np.exp(-np.array([10.0, -10.0, 10.0, 10.0]))
    expected = (np.arange(4) * w).sum() / w.sum()
    cost = torch.tensor([10.0, -10.0, 10.0, 10.0], dtype=torch.float64).view(1, 4, 1, 1)
    assert soft_argmin(cost).item() == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    cost=arrays(np.float64, (6, 3, 4), elements=st.floats(-50, 50)),
    shift=arrays(np.float64, (3, 4), elements=st.floats(-100, 100)),
)
def test_soft_argmin_shift_invariance(cost, shift):
    c = torch.from_numpy(cost)[None]
    shifted = c + torch.from_numpy(shift)[None, None]
    a, b = soft_argmin(c), soft_argmin(shifted)
    assert torch.max(torch.abs(a - b)).item() < 1e-10
    assert a.min() >= 0 and a.max() <= 5


def test_soft_argmin_matches_hard_argmin_when_saturated():
    rng = np.random.default_rng(0)
    cost = rng.uniform(0, 10, size=(1, 16, 8, 8))
    idx = rng.integers(0, 16, size=(8, 8))
    # peak at least 20 below every other level
    for y in range(8):
        for x in range(8):
            cost[0, idx[y, x], y, x] = cost[0, :, y, x].min() - 20 - rng.uniform(0, 5)
    d = soft_argmin(torch.from_numpy(cost))[0].numpy()
    assert np.abs(d - idx).max() < 0.01


# aleatoric map


def test_aleatoric_map_examples():
    const = torch.full((1, 5, 2, 3), 0.7, dtype=torch.float64)
    assert torch.allclose(aleatoric_map(const), torch.full((1, 2, 3), 0.7, dtype=torch.float64))
    two = torch.tensor([0.0, math.log(4.0)], dtype=torch.float64).view(1, 2, 1, 1)
    assert aleatoric_map(two).item() == pytest.approx(math.log(2.0), abs=1e-12)
    single = torch.randn(1, 1, 3, 3)
    assert torch.equal(aleatoric_map(single), single[:, 0])


# cost volume


def test_cost_volume_layout():
    torch.manual_seed(0)
    left, right = torch.randn(1, 3, 4, 10), torch.randn(1, 3, 4, 10)
    cv = build_cost_volume(left, right, 5)
    assert cv.shape == (1, 6, 5, 4, 10)
    assert torch.equal(cv[:, :3, 0], left)
    assert torch.equal(cv[:, 3:, 0], right)
    for d in range(5):
        assert torch.equal(cv[:, 3:, d, :, d:], right[..., : 10 - d])
        assert torch.count_nonzero(cv[:, 3:, d, :, :d]) == 0
        assert torch.equal(cv[:, :3, d], left)


def test_cost_volume_identical_inputs_zero_shift():
    f = torch.randn(1, 2, 3, 6)
    cv = build_cost_volume(f, f, 3)
    assert torch.equal(cv[:, :2, 0], cv[:, 2:, 0])


def test_cost_volume_errors():
    with pytest.raises(ShapeError):
        build_cost_volume(torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 4), 5)
    with pytest.raises(ShapeError):
        build_cost_volume(torch.randn(1, 2, 3, 4), torch.randn(1, 2, 3, 5), 2)


# feature extraction


def test_feature_map_shape():
    net = small_net()
    feats = net.extract_features(torch.randn(1, 1, 32, 64), mode="mean_only")
    assert feats.shape == (1, 4, 16, 32)


def test_identical_images_identical_features():
    net = small_net()
    img = torch.randn(1, 1, 32, 64)
    feats = net.extract_features(torch.cat([img, img.clone()]), mode="mean_only")
    assert torch.equal(feats[0], feats[1])


def test_stochastic_features_vary_with_rng():
    net = small_net()
    img = torch.randn(1, 1, 32, 64)
    a = net.extract_features(img, torch.Generator().manual_seed(0))
    b = net.extract_features(img, torch.Generator().manual_seed(1))
    assert not torch.equal(a, b)


def test_indivisible_image_raises_with_hint():
    net = small_net()
    with pytest.raises(ShapeError, match="pad by"):
        net.extract_features(torch.randn(1, 1, 31, 64), mode="mean_only")
    with pytest.raises(ShapeError, match="pad by"):
        net(torch.randn(1, 1, 36, 64), torch.randn(1, 1, 36, 64), mode="mean_only")


def test_weight_sharing_between_branches():
    net = small_net(perturbation="flipout")
    img = torch.randn(1, 1, 32, 64)
    g = torch.Generator().manual_seed(4)
    feats = net.extract_features(torch.cat([img, img]), g)
    # one draw, shared by both views even under flipout
    assert torch.equal(feats[0], feats[1])
    before = net.extract_features(torch.cat([img, img]), mode="mean_only")
    with torch.no_grad():
        net.features.stem.posterior.mean.add_(0.1)
    after = net.extract_features(torch.cat([img, img]), mode="mean_only")
    assert torch.equal(after[0], after[1])
    assert not torch.equal(before[0], after[0])


# regularization


def test_regularizer_output_shape():
    net = small_net(max_disparity=32)
    cv = torch.randn(1, 8, 16, 32, 16)
    dual = net.regularize_volume(cv, mode="mean_only")
    assert dual.cost.shape == (1, 32, 64, 32)
    assert dual.log_variance.shape == (1, 32, 64, 32)


def test_regularizer_mean_only_deterministic():
    net = small_net()
    cv = torch.randn(1, 8, 8, 16, 32)
    a = net.regularize_volume(cv, mode="mean_only")
    b = net.regularize_volume(cv, mode="mean_only")
    assert torch.equal(a.cost, b.cost) and torch.equal(a.log_variance, b.log_variance)


def test_regularizer_zero_weights_zero_output():
    net = small_net()
    with torch.no_grad():
        for p in net.regularizer.parameters():
            p.zero_()
    dual = net.regularize_volume(torch.randn(1, 8, 8, 16, 32), mode="mean_only")
    assert torch.count_nonzero(dual.cost) == 0
    assert torch.count_nonzero(dual.log_variance) == 0


# forward


def test_forward_shapes_and_determinism():
    net = small_net()
    left, right = torch.randn(1, 1, 32, 64), torch.randn(1, 1, 32, 64)
    d1, s1 = net(left, right, mode="mean_only")
    d2, s2 = net(left, right, mode="mean_only")
    assert d1.shape == s1.shape == (1, 32, 64)
    assert torch.equal(d1, d2) and torch.equal(s1, s2)
    assert d1.min() >= 0 and d1.max() <= 15


def test_forward_stochastic_variability_is_small_but_positive():
    net = small_net(init_stddev=1e-3)
    left, right = torch.randn(1, 1, 32, 64), torch.randn(1, 1, 32, 64)
    with torch.no_grad():
        draws = torch.stack([net(left, right, rng=torch.Generator().manual_seed(k))[0] for k in range(8)])
    var = draws.double().var(dim=0)
    assert not torch.equal(draws[0], draws[1])
    assert var.mean() > 0
    assert var.mean() < 1.0


def test_forward_sample_pads_and_crops():
    net = small_net()
    rng = np.random.default_rng(0)
    left, right = rng.random((30, 61)), rng.random((30, 61))
    d, s = forward_sample(net, left, right, mode="mean_only")
    assert d.shape == s.shape == (30, 61)


def test_pad_to_multiple_keeps_content():
    x = torch.randn(1, 1, 5, 7)
    padded, size = pad_to_multiple(x, 4)
    assert padded.shape == (1, 1, 8, 8) and size == (5, 7)
    assert torch.equal(padded[..., :5, :7], x)


def test_normalize_image():
    img = np.random.default_rng(0).random((8, 8)) * 200 + 30
    n = normalize_image(img)
    assert abs(n.mean()) < 1e-12 and abs(n.std() - 1) < 1e-12
    assert np.all(normalize_image(np.ones((3, 3))) == 0)


def test_deterministic_degeneration():
    net = small_net()
    set_posterior_stddev(net, 1e-30, freeze=True)
    left, right = torch.randn(1, 1, 32, 64), torch.randn(1, 1, 32, 64)
    d_mean, _ = net(left, right, mode="mean_only")
    d_st, _ = net(left, right, rng=torch.Generator().manual_seed(0))
    assert torch.allclose(d_mean, d_st, atol=1e-6)
    assert all(not p.requires_grad for n, p in net.named_parameters() if n.endswith("raw_scale"))


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(max_disparity=1)
    with pytest.raises(ConfigError):
        NetworkConfig(max_disparity=15, feature_stride=2)
    with pytest.raises(ConfigError):
        NetworkConfig(max_disparity=12, volume_channels=(4, 4, 4))
    with pytest.raises(ConfigError):
        NetworkConfig(feature_channels=0)
    assert NetworkConfig.from_dict(NetworkConfig().to_dict()) == NetworkConfig()


# gradients


@pytest.mark.parametrize("perturbation", ["naive_reparam", "flipout"])
def test_output_gradients_match_finite_differences(perturbation):
    net = tiny_model(seed=1, perturbation=perturbation)
    gen = torch.Generator()
    g = torch.Generator().manual_seed(0)
    left = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    right = torch.randn(1, 1, 8, 8, dtype=torch.float64, generator=g)
    w_d = torch.randn(1, 8, 8, dtype=torch.float64, generator=g)
    w_s = torch.randn(1, 8, 8, dtype=torch.float64, generator=g)

    def fn():
        gen.manual_seed(42)
        d, s = net(left, right, rng=gen)
        return (w_d * d).sum() + (w_s * s).sum()

    params = list(net.parameters())
    a, n = finite_difference_check(fn, params)
    err = relative_errors(a, n)
    assert np.mean(err < 1e-3) >= 0.99, np.sort(err)[-10:]
