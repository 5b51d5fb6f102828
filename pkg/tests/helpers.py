"""Shared test utilities: tiny model configs and a finite-difference gradient checker."""

import numpy as np
import torch

from probstereo.network import NetworkConfig, ProbGCNet


def tiny_config(**overrides) -> NetworkConfig:
    kw = dict(
        max_disparity=4,
        feature_stride=2,
        in_channels=1,
        feature_channels=2,
        residual_blocks=1,
        volume_channels=(2, 2),
        init_stddev=0.05,
    )
    kw.update(overrides)
    return NetworkConfig(**kw)


def tiny_model(seed=0, **overrides) -> ProbGCNet:
    torch.manual_seed(seed)
    return ProbGCNet(tiny_config(**overrides)).double()


def finite_difference_check(fn, params, h=1e-6):
    """Autograd vs central differences for scalar ``fn()`` over every entry of ``params``.

    Returns ``(analytic, numeric)`` flat float64 arrays.
    """
    for p in params:
        p.grad = None
    fn().backward()
    analytic = np.concatenate([p.grad.detach().numpy().ravel() for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    return analytic, np.array(numeric)


def relative_errors(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
