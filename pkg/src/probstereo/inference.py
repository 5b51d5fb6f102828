"""Monte-Carlo prediction with aleatoric/epistemic variance decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .network import ProbGCNet, forward_sample

DEFAULT_T = 50


@dataclass
class UncertainDisparity:
    mean_disparity: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    combined_var: np.ndarray
    T: int


def aggregate_predictions(disparities, log_variances) -> UncertainDisparity:
    """Combine ``T`` stacked passes ``(T, H, W)`` into mean and variances.

    Epistemic variance uses the 1/T convention; aleatoric variance is the
    mean of ``exp(log_variance)``. Everything is computed in float64.
    """
    d = np.asarray(disparities, dtype=np.float64)
    s = np.asarray(log_variances, dtype=np.float64)
    if d.shape != s.shape or d.ndim < 1 or d.shape[0] < 1:
        raise ValueError(f"need matching (T, ...) stacks, got {d.shape} and {s.shape}")
    mean = d.mean(axis=0)
    epistemic = ((d - mean) ** 2).mean(axis=0)
    aleatoric = np.exp(s).mean(axis=0)
    return UncertainDisparity(mean, epistemic, aleatoric, epistemic + aleatoric, d.shape[0])


def pass_generators(seed: int, T: int) -> list[torch.Generator]:
    """Derive ``T`` independent torch generators from one master seed."""
    children = np.random.SeedSequence(seed).spawn(T)
    gens = []
    for child in children:
        g = torch.Generator()
        g.manual_seed(int(child.generate_state(1, dtype=np.uint64)[0]))
        gens.append(g)
    return gens


@torch.no_grad()
def mc_predict(
    model: ProbGCNet,
    left: np.ndarray,
    right: np.ndarray,
    T: int = DEFAULT_T,
    seed: int = 0,
    mode: str = "stochastic",
) -> UncertainDisparity:
    """Run ``T`` stochastic forward passes, each with a fresh joint weight draw."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    ds, ss = [], []
    for g in pass_generators(seed, T):
        d, s = forward_sample(model, left, right, mode=mode, rng=g)
        ds.append(d.double().numpy())
        ss.append(s.double().numpy())
    return aggregate_predictions(np.stack(ds), np.stack(ss))


def uncertainty_stddev_maps(u: UncertainDisparity):
    """Return ``(aleatoric_px, epistemic_px, combined_px)`` standard deviations."""
    return np.sqrt(u.aleatoric_var), np.sqrt(u.epistemic_var), np.sqrt(u.combined_var)


@dataclass
class ConvergenceRow:
    T: int
    mean_stddev: float
    std_error: float


def convergence_analysis(
    model: ProbGCNet,
    samples: Sequence,
    T_values: Sequence[int],
    repeats: int = 10,
    seed: int = 0,
) -> list[ConvergenceRow]:
    """Spread of the MC mean disparity across repeated runs, per ``T``.

    For each ``T`` and sample, ``mc_predict`` runs ``repeats`` times with
    distinct seeds; the per-pixel standard deviation of the mean disparity
    across runs is averaged over pixels and samples. ``std_error`` is the
    approximate standard error of that estimate, from the sampling spread of
    a standard deviation over ``repeats`` draws.
    """
    if not T_values:
        raise ValueError("T_values must not be empty")
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    seeds = np.random.SeedSequence(seed)
    rows = []
    for T in T_values:
        per_sample = []
        for sample in samples:
            run_seeds = seeds.spawn(repeats)
            means = np.stack(
                [
                    mc_predict(model, sample.left, sample.right, T, int(rs.generate_state(1)[0])).mean_disparity
                    for rs in run_seeds
                ]
            )
            per_sample.append(means.std(axis=0, ddof=1).mean())
        value = float(np.mean(per_sample))
        se = value / math.sqrt(2 * (repeats - 1) * len(per_sample))
        rows.append(ConvergenceRow(int(T), value, se))
    return rows
