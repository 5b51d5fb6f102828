"""Checkpoint persistence.

A checkpoint is a ``torch.save`` dict holding the format version, the
network config, named parameter tensors (posterior ``mean``/``raw_scale``
for variational layers, plain weights for deterministic ones), the
optimizer state, both random streams and the epoch/step counters.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

import torch

from .errors import ConfigError
from .network import NetworkConfig, ProbGCNet

FORMAT_VERSION = 1


def build_checkpoint(model: ProbGCNet, optimizer=None, rng_state=None, epoch: int = 0, step: int = 0, train_config=None):
    return {
        "format_version": FORMAT_VERSION,
        "network_config": model.cfg.to_dict(),
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "parameters": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "parameter_shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "epoch": epoch,
        "step": step,
        "train_config": train_config,
    }


def save_checkpoint(path, ckpt: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format version {version!r}")
    return ckpt


def model_from_checkpoint(ckpt: dict, expected: Optional[NetworkConfig] = None) -> ProbGCNet:
    """Rebuild the network; fail if ``expected`` differs from the stored config."""
    cfg = NetworkConfig.from_dict(ckpt["network_config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = {
            k: (v, cfg.to_dict().get(k)) for k, v in expected.to_dict().items() if cfg.to_dict().get(k) != v
        }
        raise ConfigError(f"network config does not match checkpoint (requested, stored): {diff}")
    model = ProbGCNet(cfg).to(getattr(torch, ckpt.get("dtype", "float32")))
    model.load_state_dict(ckpt["parameters"])
    return model


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
