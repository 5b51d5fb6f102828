"""Training loop: one random crop and one weight draw per step, RMSProp."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import build_checkpoint, save_checkpoint
from .data_io import DatasetSpec, StereoSample, load_dataset, random_crop
from .errors import ConfigError, DataError, NumericalError
from .evaluation import MetricsAccumulator, MetricsReport
from .inference import mc_predict, uncertainty_stddev_maps
from .network import NetworkConfig, ProbGCNet, image_to_tensor
from .objective import total_loss
from .variational import set_posterior_stddev

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    dataset: dict = field(default_factory=dict)
    val_dataset: Optional[dict] = None
    network: dict = field(default_factory=dict)
    epochs: int = 12
    batch_size: int = 1
    learning_rate: float = 1e-3
    optimizer: str = "rmsprop"
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    # None means 1 / (training samples per epoch)
    kl_weight: Optional[float] = None
    loss_norm: str = "l1"
    crop_width: int = 256
    crop_height: int = 128
    seed: int = 0
    checkpoint: str = "checkpoint.pt"
    checkpoint_every: int = 1
    eval_every: int = 0
    eval_T: int = 10
    max_steps: Optional[int] = None
    dtype: str = "float32"
    # "mean_only" trains the deterministic network (posterior means as weights)
    train_mode: str = "stochastic"
    # fixes every posterior stddev (not trained); ~0 gives the deterministic net
    freeze_posterior_stddev: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer != "rmsprop":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if self.loss_norm not in ("l1", "l2"):
            raise ConfigError(f"unknown loss norm {self.loss_norm!r}")
        if self.train_mode not in ("stochastic", "mean_only"):
            raise ConfigError(f"unknown train_mode {self.train_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.from_dict(self.network)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: ProbGCNet
    log: list
    report: Optional[MetricsReport]
    optimizer: torch.optim.Optimizer


def _batch_tensors(crops: Sequence[StereoSample], dtype):
    left = torch.cat([image_to_tensor(c.left, dtype) for c in crops])
    right = torch.cat([image_to_tensor(c.right, dtype) for c in crops])
    gt = torch.from_numpy(np.stack([np.nan_to_num(c.gt_disparity, posinf=0.0) for c in crops])).to(dtype)
    mask = torch.from_numpy(np.stack([c.valid_mask for c in crops]))
    return left, right, gt, mask


def evaluate_model(model, samples: Sequence[StereoSample], T: int, seed: int) -> MetricsReport:
    acc = MetricsAccumulator()
    children = np.random.SeedSequence(seed).spawn(len(samples))
    for sample, child in zip(samples, children):
        u = mc_predict(model, sample.left, sample.right, T, int(child.generate_state(1)[0]))
        alea, epi, _ = uncertainty_stddev_maps(u)
        acc.update(u.mean_disparity, sample.gt_disparity, sample.valid_mask, alea, epi)
    return acc.report()


def _dump_nonfinite(out_dir, step, record, model):
    path = Path(out_dir) / f"nonfinite_step_{step}.json"
    norms = {name: float(p.detach().double().norm()) for name, p in model.named_parameters()}
    path.write_text(json.dumps({"step": step, "losses": record, "parameter_norms": norms}, indent=1))
    return path


def train(
    cfg: TrainConfig,
    out_dir,
    samples: Optional[Sequence[StereoSample]] = None,
    val_samples: Optional[Sequence[StereoSample]] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train a model; writes ``loss_log.jsonl`` and checkpoints to ``out_dir``.

    ``samples`` overrides ``cfg.dataset`` (useful for in-memory synthetic
    sets). Each epoch visits every training sample once in shuffled order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = load_dataset(DatasetSpec(**cfg.dataset))
    if val_samples is None and cfg.val_dataset:
        val_samples = load_dataset(DatasetSpec(**cfg.val_dataset))
    samples = list(samples)
    if not samples:
        raise DataError("training dataset is empty")
    if any(s.gt_disparity is None for s in samples):
        raise DataError("every training sample needs ground-truth disparity")

    dtype = getattr(torch, cfg.dtype)
    torch.manual_seed(cfg.seed)
    net_cfg = cfg.network_config()
    model = ProbGCNet(net_cfg).to(dtype)
    if cfg.freeze_posterior_stddev is not None:
        set_posterior_stddev(model, cfg.freeze_posterior_stddev, freeze=True)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.RMSprop(params, lr=cfg.learning_rate, alpha=cfg.rmsprop_alpha, eps=cfg.rmsprop_eps)

    kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / len(samples)
    data_rng = np.random.default_rng(cfg.seed)
    weight_rng = torch.Generator().manual_seed(cfg.seed)
    log_path = out_dir / "loss_log.jsonl"
    log = []
    step = 0
    done = False
    t0 = time.time()
    with open(log_path, "w") as log_file:
        for epoch in range(cfg.epochs):
            order = data_rng.permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                crops = [random_crop(samples[i], cfg.crop_width, cfg.crop_height, data_rng) for i in idx]
                left, right, gt, mask = _batch_tensors(crops, dtype)
                if not mask.any():
                    continue
                model.train()
                d_hat, s = model(left, right, mode=cfg.train_mode, rng=weight_rng)
                loss = total_loss(gt, d_hat, s, mask, model, kl_weight, norm=cfg.loss_norm)
                record = {"step": step, "epoch": epoch, **loss.as_dict()}
                record["mae"] = float((d_hat.detach() - gt)[mask].abs().mean())
                if not math.isfinite(record["total"]):
                    dump = _dump_nonfinite(out_dir, step, record, model)
                    raise NumericalError(f"non-finite loss at step {step}; diagnostics in {dump}")
                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()
                log.append(record)
                log_file.write(json.dumps(record) + "\n")
                if on_step:
                    on_step(record)
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            logger.info("epoch %d done after %d steps (%.1fs)", epoch, step, time.time() - t0)
            last = done or epoch == cfg.epochs - 1
            if cfg.checkpoint_every and ((epoch + 1) % cfg.checkpoint_every == 0 or last):
                _save(model, optimizer, data_rng, weight_rng, epoch + 1, step, cfg, out_dir)
            if val_samples and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 and not last:
                rep = evaluate_model(model, val_samples, cfg.eval_T, cfg.seed)
                logger.info("epoch %d validation: %s", epoch, rep.to_dict())
            if done:
                break

    report = evaluate_model(model, val_samples, cfg.eval_T, cfg.seed) if val_samples else None
    if report is not None:
        (out_dir / "val_metrics.json").write_text(json.dumps(report.to_dict(), indent=1))
    return TrainResult(model, log, report, optimizer)


def _save(model, optimizer, data_rng, weight_rng, epoch, step, cfg, out_dir):
    rng_state = {"numpy": data_rng.bit_generator.state, "torch": weight_rng.get_state()}
    ckpt = build_checkpoint(model, optimizer, rng_state, epoch, step, cfg.to_dict())
    path = Path(cfg.checkpoint)
    if not path.is_absolute():
        path = Path(out_dir) / path
    save_checkpoint(path, ckpt)
