"""Training objective: heteroscedastic regression plus KL regularizer."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .variational import PriorSpec, kl_to_prior, variational_layers


@dataclass
class LossBreakdown:
    regression: torch.Tensor
    kl: torch.Tensor
    kl_weight: float
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "regression": float(self.regression.detach()),
            "kl": float(self.kl.detach()),
            "kl_weight": float(self.kl_weight),
            "total": float(self.total.detach()),
        }


def regression_loss(d, d_hat, s, mask=None, norm: str = "l1") -> torch.Tensor:
    """Mean over valid pixels of ``0.5 * exp(-s) * |d - d_hat| + 0.5 * s``.

    ``s`` is the predicted log variance. With ``norm="l2"`` the residual is
    squared instead.
    """
    if mask is None:
        mask = torch.ones_like(d, dtype=torch.bool)
    mask = mask.bool()
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid ground truth")
    residual = d[mask] - d_hat[mask]
    if norm == "l1":
        r = residual.abs()
    elif norm == "l2":
        r = residual**2
    else:
        raise ValueError(f"unknown norm {norm!r}")
    s = s[mask]
    return (0.5 * torch.exp(-s) * r + 0.5 * s).sum() / n


def kl_total(model: nn.Module, prior: PriorSpec = PriorSpec()) -> torch.Tensor:
    """Sum of the KL divergences of every weight posterior in ``model``."""
    total = None
    for post in variational_layers(model):
        kl = kl_to_prior(post, prior)
        total = kl if total is None else total + kl
    if total is None:
        param = next(model.parameters(), None)
        dtype = param.dtype if param is not None else torch.get_default_dtype()
        return torch.zeros((), dtype=dtype)
    return total


def total_loss(d, d_hat, s, mask, model, kl_weight: float, prior=None, norm="l1") -> LossBreakdown:
    if kl_weight < 0:
        raise ValueError("kl_weight must be >= 0")
    if prior is None:
        prior = getattr(model, "prior", PriorSpec())
    reg = regression_loss(d, d_hat, s, mask, norm)
    kl = kl_total(model, prior)
    return LossBreakdown(reg, kl, kl_weight, reg + kl_weight * kl)
