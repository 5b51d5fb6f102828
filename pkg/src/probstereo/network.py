"""Probabilistic GC-Net style stereo network.

Pipeline: shared 2D feature extractor -> concatenation cost volume ->
3D encoder/decoder with skip connections -> (cost, log-variance) volumes ->
soft argmin disparity and averaged log variance.

Tensor layouts follow torch: images ``(B, C, H, W)``, volumes
``(B, C, D, H, W)``; cost and log-variance volumes are ``(B, D, H, W)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .variational import (
    DeterministicConvTranspose,
    MEAN_INITS,
    LayerConfig,
    PriorSpec,
    SamplingMode,
    VariationalConv,
)


@dataclass
class NetworkConfig:
    max_disparity: int = 32
    feature_stride: int = 2
    in_channels: int = 1
    feature_channels: int = 16
    residual_blocks: int = 4
    # 3D widths: entry 0 at cost-volume resolution, one more entry per encoder level
    volume_channels: tuple[int, ...] = (16, 16, 16)
    perturbation: str = "naive_reparam"
    # flipout on the 3D convs too, or 2D feature convs only
    flipout_3d: bool = True
    init_stddev: float = 1e-3
    # posterior mean init; "he" avoids a long initial plateau without batch norm
    mean_init: str = "he"
    prior_mean: float = 0.0
    prior_stddev: float = 1.0

    def __post_init__(self):
        self.volume_channels = tuple(int(c) for c in self.volume_channels)
        if self.max_disparity < 2:
            raise ConfigError(f"max_disparity must be >= 2, got {self.max_disparity}")
        if self.feature_stride < 1:
            raise ConfigError(f"feature_stride must be >= 1, got {self.feature_stride}")
        if self.max_disparity % self.feature_stride:
            raise ConfigError(
                f"max_disparity {self.max_disparity} is not a multiple of feature_stride {self.feature_stride}"
            )
        widths = (self.in_channels, self.feature_channels, *self.volume_channels)
        if not self.volume_channels or min(widths) < 1:
            raise ConfigError(f"all channel widths must be >= 1, got {widths}")
        if self.residual_blocks < 0:
            raise ConfigError("residual_blocks must be >= 0")
        if self.mean_init not in MEAN_INITS:
            raise ConfigError(f"mean_init must be one of {MEAN_INITS}, got {self.mean_init!r}")
        if self.perturbation not in ("naive_reparam", "flipout"):
            raise ConfigError(f"unknown perturbation scheme {self.perturbation!r}")
        if self.disparity_levels % (2**self.depth):
            raise ConfigError(
                f"{self.disparity_levels} cost-volume disparity levels cannot be halved "
                f"{self.depth} times by the encoder"
            )
        if self.prior_stddev <= 0 or self.init_stddev <= 0:
            raise ConfigError("prior_stddev and init_stddev must be > 0")

    @property
    def depth(self) -> int:
        return len(self.volume_channels) - 1

    @property
    def disparity_levels(self) -> int:
        return self.max_disparity // self.feature_stride

    @property
    def size_multiple(self) -> int:
        """Image height and width must be multiples of this."""
        return self.feature_stride * 2**self.depth

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(self.prior_mean, self.prior_stddev)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_channels"] = list(self.volume_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class DualVolume(NamedTuple):
    cost: torch.Tensor
    log_variance: torch.Tensor


def build_cost_volume(left_f: torch.Tensor, right_f: torch.Tensor, levels: int) -> torch.Tensor:
    """Concatenate left features with right features shifted by each disparity.

    Level ``d`` at column ``x`` holds ``[left_f[..., x], right_f[..., x - d]]``;
    right features shifted in from outside the image are zero.
    Returns ``(B, 2C, levels, H, W)``.
    """
    if left_f.shape != right_f.shape:
        raise ShapeError(f"feature maps differ in shape: {tuple(left_f.shape)} vs {tuple(right_f.shape)}")
    b, c, h, w = left_f.shape
    if levels > w:
        raise ShapeError(f"{levels} disparity levels exceed feature width {w}: no valid overlap")
    left = left_f.unsqueeze(2).expand(b, c, levels, h, w)
    # pad on the left then take a sliding window: column x of level d reads x - d
    padded = F.pad(right_f, (levels - 1, 0))
    right = torch.stack(
        [padded[..., levels - 1 - d : levels - 1 - d + w] for d in range(levels)], dim=2
    )
    return torch.cat([left, right], dim=1)


def soft_argmin(cost: torch.Tensor) -> torch.Tensor:
    """Expected disparity under ``softmax(-cost)`` along dim 1 (``(B, D, H, W)``)."""
    prob = torch.softmax(-cost, dim=1)
    disp = torch.arange(cost.shape[1], dtype=cost.dtype, device=cost.device)
    return (prob * disp.view(1, -1, 1, 1)).sum(dim=1)


def aleatoric_map(log_variance: torch.Tensor) -> torch.Tensor:
    """Per-pixel log variance: mean of the log-variance volume over disparity."""
    return log_variance.mean(dim=1)


def _vconv(cin, cout, k, stride, pert, net: NetworkConfig, ndim):
    cfg = LayerConfig(
        in_channels=cin,
        out_channels=cout,
        kernel_size=(k,) * ndim,
        stride=(stride,) * ndim,
        padding=(k // 2,) * ndim,
        perturbation=pert,
    )
    return VariationalConv(cfg, init_stddev=net.init_stddev, mean_init=net.mean_init)


def _deconv(cin, cout, stride):
    cfg = LayerConfig(
        in_channels=cin,
        out_channels=cout,
        kernel_size=(3, 3, 3),
        stride=stride if isinstance(stride, tuple) else (stride,) * 3,
        padding=(1, 1, 1),
    )
    return DeterministicConvTranspose(cfg)


class ResidualBlock(nn.Module):
    def __init__(self, channels, pert, net: NetworkConfig):
        super().__init__()
        self.conv1 = _vconv(channels, channels, 3, 1, pert, net, 2)
        self.conv2 = _vconv(channels, channels, 3, 1, pert, net, 2)

    def forward(self, x, rng, mode):
        y = F.relu(self.conv1(x, rng, mode))
        return F.relu(x + self.conv2(y, rng, mode))


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.feature_channels
        pert = cfg.perturbation
        k0 = 5 if cfg.feature_stride > 1 else 3
        self.stem = VariationalConv(
            LayerConfig(
                cfg.in_channels,
                c,
                (k0, k0),
                (cfg.feature_stride,) * 2,
                (k0 // 2,) * 2,
                perturbation=pert,
            ),
            init_stddev=cfg.init_stddev,
            mean_init=cfg.mean_init,
        )
        self.blocks = nn.ModuleList(ResidualBlock(c, pert, cfg) for _ in range(cfg.residual_blocks))
        self.head = _vconv(c, c, 3, 1, pert, cfg, 2)

    def forward(self, x, rng, mode):
        x = F.relu(self.stem(x, rng, mode))
        for block in self.blocks:
            x = block(x, rng, mode)
        return self.head(x, rng, mode)


class VolumeRegularizer(nn.Module):
    """3D encoder/decoder emitting a two-channel volume at full resolution."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = cfg.volume_channels
        pert = cfg.perturbation if cfg.flipout_3d else "naive_reparam"
        self.pre1 = _vconv(2 * cfg.feature_channels, widths[0], 3, 1, pert, cfg, 3)
        self.pre2 = _vconv(widths[0], widths[0], 3, 1, pert, cfg, 3)
        self.down = nn.ModuleList()
        self.down_refine = nn.ModuleList()
        self.up = nn.ModuleList()
        for k in range(1, len(widths)):
            self.down.append(_vconv(widths[k - 1], widths[k], 3, 2, pert, cfg, 3))
            self.down_refine.append(_vconv(widths[k], widths[k], 3, 1, pert, cfg, 3))
            self.up.append(_deconv(widths[k], widths[k - 1], 2))
        fs = cfg.feature_stride
        self.head = _deconv(widths[0], 2, (fs, fs, fs))

    def forward(self, cv, rng, mode) -> DualVolume:
        x = F.relu(self.pre1(cv, rng, mode))
        x = F.relu(self.pre2(x, rng, mode))
        skips = [x]
        for down, refine in zip(self.down, self.down_refine):
            x = F.relu(down(x, rng, mode))
            x = F.relu(refine(x, rng, mode))
            skips.append(x)
        for k in reversed(range(len(self.up))):
            x = F.relu(self.up[k](x)) + skips[k]
        out = self.head(x)
        return DualVolume(out[:, 0], out[:, 1])


class ProbGCNet(nn.Module):
    """GC-Net with Gaussian posteriors on every 2D and 3D convolution."""

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.features = FeatureExtractor(self.cfg)
        self.regularizer = VolumeRegularizer(self.cfg)
        for name, module in self.named_modules():
            module.layer_name = name or "root"
        # left and right share one flipout draw per pair
        for module in self.features.modules():
            if isinstance(module, VariationalConv):
                module.tied_groups = 2

    @property
    def prior(self) -> PriorSpec:
        return self.cfg.prior

    def check_image_shape(self, h: int, w: int) -> None:
        m = self.cfg.size_multiple
        if h % m or w % m:
            raise ShapeError(
                f"image size {h}x{w} must be a multiple of {m} "
                f"(pad by {(-h) % m} rows and {(-w) % m} columns, e.g. with pad_to_multiple)"
            )

    def extract_features(self, images: torch.Tensor, rng=None, mode: SamplingMode = "stochastic"):
        """Features at ``1 / feature_stride`` resolution for a batch of images."""
        h, w = images.shape[-2:]
        fs = self.cfg.feature_stride
        if h % fs or w % fs:
            raise ShapeError(
                f"image size {h}x{w} is not divisible by feature_stride {fs} "
                f"(pad by {(-h) % fs} rows and {(-w) % fs} columns)"
            )
        return self.features(images, rng, mode)

    def regularize_volume(self, cv: torch.Tensor, rng=None, mode: SamplingMode = "stochastic") -> DualVolume:
        return self.regularizer(cv, rng, mode)

    def forward(self, left, right, mode: SamplingMode = "stochastic", rng: Optional[torch.Generator] = None):
        """Return ``(disparity, log_variance)`` maps of shape ``(B, H, W)``.

        In stochastic mode all variational layers draw one joint weight set
        from ``rng``; the left and right branches use the same weights.
        """
        if left.shape != right.shape:
            raise ShapeError(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ")
        self.check_image_shape(*left.shape[-2:])
        b = left.shape[0]
        feats = self.extract_features(torch.cat([left, right], dim=0), rng, mode)
        cv = build_cost_volume(feats[:b], feats[b:], self.cfg.disparity_levels)
        dual = self.regularize_volume(cv, rng, mode)
        return soft_argmin(dual.cost), aleatoric_map(dual.log_variance)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-image standardization to zero mean and unit variance."""
    img = np.asarray(img, dtype=np.float64)
    std = img.std()
    return (img - img.mean()) / (std if std > 1e-12 else 1.0)


def image_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W)`` or ``(H, W, C)`` array -> normalized ``(1, C, H, W)`` tensor."""
    arr = normalize_image(img)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).unsqueeze(0)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad the bottom and right edges up to a multiple of ``multiple``.

    Padding only at the far edges keeps pixel columns, and thus disparities,
    unchanged. Returns the padded tensor and the original ``(H, W)``.
    """
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, (h, w)


def forward_sample(model: ProbGCNet, left: np.ndarray, right: np.ndarray, mode="stochastic", rng=None):
    """Run the model on one numpy image pair of any size.

    Images are normalized, padded to the size multiple and the outputs are
    cropped back. Returns ``(disparity, log_variance)`` as ``(H, W)`` tensors.
    """
    dtype = next(model.parameters()).dtype
    lt, (h, w) = pad_to_multiple(image_to_tensor(left, dtype), model.cfg.size_multiple)
    rt, _ = pad_to_multiple(image_to_tensor(right, dtype), model.cfg.size_multiple)
    d, s = model(lt, rt, mode=mode, rng=rng)
    return d[0, :h, :w], s[0, :h, :w]
