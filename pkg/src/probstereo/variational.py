"""Convolutions with Gaussian weight posteriors.

Weights of the 2D and 3D convolutions are random variables with a
mean-field Gaussian posterior ``N(mean, softplus(raw_scale)^2)``. Transposed
convolutions stay deterministic point estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

SamplingMode = Literal["stochastic", "mean_only"]
Perturbation = Literal["naive_reparam", "flipout"]

SAMPLING_MODES = ("stochastic", "mean_only")
PERTURBATIONS = ("naive_reparam", "flipout")


def softplus_inverse(x: float) -> float:
    """Raw scale whose softplus equals ``x`` (``x > 0``)."""
    if x <= 0:
        raise ValueError(f"softplus_inverse needs x > 0, got {x}")
    # log(expm1(x)) loses precision for tiny x; log(x) is the limit there
    if x < 1e-6:
        return math.log(x)
    return math.log(math.expm1(x))


@dataclass(frozen=True)
class PriorSpec:
    """Factorized Gaussian prior placed on every variational weight."""

    mean: float = 0.0
    stddev: float = 1.0

    def __post_init__(self):
        if not self.stddev > 0:
            raise ValueError(f"prior stddev must be > 0, got {self.stddev}")


@dataclass(frozen=True)
class LayerConfig:
    in_channels: int
    out_channels: int
    kernel_size: tuple[int, ...]
    stride: tuple[int, ...] = ()
    padding: tuple[int, ...] = ()
    sampling_mode: SamplingMode = "stochastic"
    perturbation: Perturbation = "naive_reparam"

    def __post_init__(self):
        ndim = len(self.kernel_size)
        if ndim not in (2, 3):
            raise ValueError(f"only 2D and 3D kernels are supported, got {self.kernel_size}")
        # empty stride/padding expand to 1 and 0 per spatial dim
        if not self.stride:
            object.__setattr__(self, "stride", (1,) * ndim)
        if not self.padding:
            object.__setattr__(self, "padding", (0,) * ndim)
        if len(self.stride) != ndim or len(self.padding) != ndim:
            raise ValueError("stride and padding must have one entry per spatial dim")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"stride must be >= 1 per dim, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation scheme {self.perturbation!r}")

    @property
    def ndim(self) -> int:
        return len(self.kernel_size)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel_size)


# "he" keeps activation variance constant through ReLU layers
MEAN_INITS = ("glorot", "he")


class GaussianPosterior(nn.Module):
    """Mean and raw scale of a factorized Gaussian over a weight tensor."""

    def __init__(self, shape: Sequence[int], init_stddev: float = 1e-3, mean_init: str = "glorot"):
        super().__init__()
        if mean_init not in MEAN_INITS:
            raise ValueError(f"mean_init must be one of {MEAN_INITS}, got {mean_init!r}")
        self.mean_init = mean_init
        self.mean = nn.Parameter(torch.empty(tuple(shape)))
        self.raw_scale = nn.Parameter(torch.empty(tuple(shape)))
        self.reset_parameters(init_stddev)

    def reset_parameters(self, init_stddev: float = 1e-3) -> None:
        if self.mean.dim() < 2:
            nn.init.zeros_(self.mean)
        elif self.mean_init == "he":
            nn.init.kaiming_uniform_(self.mean, a=0.0, nonlinearity="relu")
        else:
            nn.init.xavier_uniform_(self.mean)
        with torch.no_grad():
            self.raw_scale.fill_(softplus_inverse(init_stddev))

    @property
    def stddev(self) -> torch.Tensor:
        return F.softplus(self.raw_scale)

    def sample(self, rng: torch.Generator) -> torch.Tensor:
        return sample_weights(self, rng)


def sample_weights(posterior: GaussianPosterior, rng: torch.Generator) -> torch.Tensor:
    """Draw ``mean + stddev * eps`` with ``eps ~ N(0, 1)`` from ``rng``."""
    mean = posterior.mean
    assert mean.shape == posterior.raw_scale.shape
    eps = torch.randn(mean.shape, generator=rng, dtype=mean.dtype, device=mean.device)
    return mean + posterior.stddev * eps


def gaussian_kl(
    mean_q: torch.Tensor,
    stddev_q: torch.Tensor,
    prior: PriorSpec = PriorSpec(),
) -> torch.Tensor:
    """Summed closed-form ``KL(N(mean_q, stddev_q^2) || prior)``."""
    var_p = prior.stddev**2
    kl = (
        math.log(prior.stddev)
        - torch.log(stddev_q)
        + (stddev_q**2 + (mean_q - prior.mean) ** 2) / (2.0 * var_p)
        - 0.5
    )
    return kl.sum()


def kl_to_prior(posterior: GaussianPosterior, prior: PriorSpec = PriorSpec()) -> torch.Tensor:
    return gaussian_kl(posterior.mean, posterior.stddev, prior)


def _conv_fn(ndim: int):
    return F.conv2d if ndim == 2 else F.conv3d


def _check_conv_input(x: torch.Tensor, cfg: LayerConfig, name: str) -> None:
    if x.dim() != cfg.ndim + 2:
        raise ShapeError(
            f"layer {name!r}: expected a {cfg.ndim + 2}D input (batch, channels, spatial...), "
            f"got shape {tuple(x.shape)}"
        )
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"layer {name!r}: expected {cfg.in_channels} input channels, got {x.shape[1]}"
        )
    for size, k, p in zip(x.shape[2:], cfg.kernel_size, cfg.padding):
        if size + 2 * p < k:
            raise ShapeError(
                f"layer {name!r}: spatial size {tuple(x.shape[2:])} too small for kernel "
                f"{cfg.kernel_size} with padding {cfg.padding}"
            )


def _rademacher(shape, rng, like: torch.Tensor) -> torch.Tensor:
    bits = torch.randint(0, 2, shape, generator=rng, device=like.device)
    return (2 * bits - 1).to(like.dtype)


def conv_variational(
    x: torch.Tensor,
    posterior: GaussianPosterior,
    cfg: LayerConfig,
    rng: Optional[torch.Generator] = None,
    bias: Optional[torch.Tensor] = None,
    mode: Optional[SamplingMode] = None,
    tied_groups: int = 1,
    name: str = "conv",
) -> torch.Tensor:
    """Convolve ``x`` with weights drawn from ``posterior``.

    ``naive_reparam`` draws one weight set shared by the whole batch.
    ``flipout`` convolves with the mean weights and adds a perturbation
    decorrelated per example by random sign flips on the input and output
    channels. ``tied_groups`` splits the batch into that many consecutive
    blocks that reuse the same sign flips, so the left and right images of
    a pair see identical weights.
    """
    _check_conv_input(x, cfg, name)
    mode = mode or cfg.sampling_mode
    conv = _conv_fn(cfg.ndim)
    kwargs = dict(stride=cfg.stride, padding=cfg.padding)

    if mode == "mean_only":
        return conv(x, posterior.mean, bias, **kwargs)
    if rng is None:
        raise ValueError(f"layer {name!r}: stochastic mode needs a random generator")

    if cfg.perturbation == "naive_reparam":
        return conv(x, sample_weights(posterior, rng), bias, **kwargs)

    batch = x.shape[0]
    if batch % tied_groups:
        raise ShapeError(f"layer {name!r}: batch {batch} not divisible into {tied_groups} tied groups")
    n = batch // tied_groups
    eps = torch.randn(posterior.mean.shape, generator=rng, dtype=x.dtype, device=x.device)
    delta = posterior.stddev * eps
    spatial = (1,) * cfg.ndim
    sign_in = _rademacher((n, cfg.in_channels, *spatial), rng, x).repeat(tied_groups, *([1] * (cfg.ndim + 1)))
    sign_out = _rademacher((n, cfg.out_channels, *spatial), rng, x).repeat(tied_groups, *([1] * (cfg.ndim + 1)))
    out = conv(x, posterior.mean, bias, **kwargs)
    return out + conv(x * sign_in, delta, None, **kwargs) * sign_out


def transposed_output_padding(cfg: LayerConfig) -> tuple[int, ...]:
    """Output padding that makes a transposed conv upsample exactly by ``stride``."""
    out = []
    for k, s, p in zip(cfg.kernel_size, cfg.stride, cfg.padding):
        op = s - k + 2 * p
        if op < 0 or op >= s:
            raise ShapeError(
                f"kernel {cfg.kernel_size}, stride {cfg.stride}, padding {cfg.padding} "
                "cannot upsample by exactly the stride"
            )
        out.append(op)
    return tuple(out)


def conv_transposed_deterministic(
    x: torch.Tensor,
    weight: torch.Tensor,
    cfg: LayerConfig,
    bias: Optional[torch.Tensor] = None,
    name: str = "deconv",
) -> torch.Tensor:
    """Transposed convolution whose output is ``stride`` times the input size.

    ``weight`` has the torch layout ``(in_channels, out_channels, *kernel)``.
    """
    if x.dim() != cfg.ndim + 2 or x.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"layer {name!r}: expected input (batch, {cfg.in_channels}, {cfg.ndim} spatial dims), "
            f"got {tuple(x.shape)}"
        )
    expected = (cfg.in_channels, cfg.out_channels, *cfg.kernel_size)
    if tuple(weight.shape) != expected:
        raise ShapeError(f"layer {name!r}: weight shape {tuple(weight.shape)} != {expected}")
    fn = F.conv_transpose2d if cfg.ndim == 2 else F.conv_transpose3d
    return fn(
        x,
        weight,
        bias,
        stride=cfg.stride,
        padding=cfg.padding,
        output_padding=transposed_output_padding(cfg),
    )


class VariationalConv(nn.Module):
    """2D or 3D convolution with a Gaussian posterior over its weights.

    The bias is a deterministic point estimate.
    """

    def __init__(self, cfg: LayerConfig, init_stddev: float = 1e-3, bias: bool = True, mean_init: str = "glorot"):
        super().__init__()
        self.cfg = cfg
        self.posterior = GaussianPosterior(cfg.weight_shape, init_stddev, mean_init)
        self.bias = nn.Parameter(torch.zeros(cfg.out_channels)) if bias else None
        self.tied_groups = 1

    def forward(self, x, rng=None, mode: Optional[SamplingMode] = None):
        return conv_variational(
            x,
            self.posterior,
            self.cfg,
            rng=rng,
            bias=self.bias,
            mode=mode,
            tied_groups=self.tied_groups,
            name=getattr(self, "layer_name", type(self).__name__),
        )


class DeterministicConvTranspose(nn.Module):
    """Transposed convolution with Glorot-initialized point-estimate weights."""

    def __init__(self, cfg: LayerConfig, bias: bool = True):
        super().__init__()
        transposed_output_padding(cfg)
        self.cfg = cfg
        self.weight = nn.Parameter(torch.empty(cfg.in_channels, cfg.out_channels, *cfg.kernel_size))
        nn.init.xavier_uniform_(self.weight)
        self.bias = nn.Parameter(torch.zeros(cfg.out_channels)) if bias else None

    def forward(self, x):
        return conv_transposed_deterministic(
            x, self.weight, self.cfg, self.bias, name=getattr(self, "layer_name", type(self).__name__)
        )


def variational_layers(module: nn.Module):
    """Yield every ``GaussianPosterior`` inside ``module``."""
    for m in module.modules():
        if isinstance(m, GaussianPosterior):
            yield m


def set_posterior_stddev(module: nn.Module, stddev: float, freeze: bool = False) -> None:
    """Reset every posterior scale to ``stddev``; optionally stop training it."""
    raw = softplus_inverse(stddev)
    for post in variational_layers(module):
        with torch.no_grad():
            post.raw_scale.fill_(raw)
        post.raw_scale.requires_grad_(not freeze)
