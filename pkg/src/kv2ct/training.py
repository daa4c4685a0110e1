"""Patient-specific optimisation: smooth-L1 loss, AdamW, linear warm-up then cosine annealing."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from kv2ct.errors import ConfigError, NumericError, ShapeError
from kv2ct.model import Normalization, build_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 8
    lr_peak: float = 5e-4
    lr_init: float = 1e-7
    warmup_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # knee of the smooth-L1 loss in normalised units
    smooth_l1_beta: float = 1.0
    seed: int = 0
    hu_low: float = -1024.0
    hu_high: float = 3071.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs})")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ConfigError("need 0 < beta1 < beta2 < 1")
        if self.smooth_l1_beta <= 0:
            raise ConfigError("smooth_l1_beta must be positive")
        if self.hu_high <= self.hu_low:
            raise ConfigError("hu_high must exceed hu_low")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def smooth_l1(pred, target, beta=1.0):
    """Mean of 0.5 e^2 / beta for |e| < beta, |e| - 0.5 beta otherwise."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if isinstance(pred, np.ndarray):
        e = np.abs(np.asarray(pred, float) - np.asarray(target, float))
        return float(np.mean(np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta)))
    e = (pred - target).abs()
    return torch.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta).mean()


def lr_schedule(epoch, cfg):
    """Learning rate for ``epoch``: linear warm-up from lr_init, then half-cosine decay from lr_peak."""
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * epoch / w
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.epochs - w)))


def make_optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2),
                             eps=cfg.eps, weight_decay=cfg.weight_decay)


@dataclass
class TrainResult:
    net: torch.nn.Module
    normalization: Normalization
    curve: list = field(default_factory=list)  # (epoch, lr, mean loss)
    best_epoch: int = -1
    best_loss: float = math.inf


def fit_normalization(kv, cfg):
    """Scalar kV standardisation from the training inputs plus the configured HU window."""
    kv = np.asarray(kv, dtype=np.float64)
    std = float(kv.std())
    return Normalization(cfg.hu_low, cfg.hu_high, 1.0 / std if std > 0 else 1.0)


def train(kv, ct, model_cfg, cfg, normalization=None, net=None, progress=None):
    """Fit a model to ``kv[N, 2, H, W]`` -> ``ct[N, D, A, S]`` (HU) pairs.

    Returns the parameters of the epoch with the lowest mean loss.
    """
    kv = np.asarray(kv, dtype=np.float32)
    ct = np.asarray(ct, dtype=np.float32)
    if len(kv) == 0 or len(kv) != len(ct):
        raise ShapeError(f"need a non-empty, aligned pair set, got {len(kv)} kV and {len(ct)} CT")
    if tuple(ct.shape[1:]) != model_cfg.output_dims:
        raise ShapeError(f"CT targets {tuple(ct.shape[1:])} do not match model output {model_cfg.output_dims}")
    norm = normalization or fit_normalization(kv, cfg)
    x_all = torch.from_numpy(kv * np.float32(norm.kv_scale))
    y_all = torch.from_numpy(norm.hu_to_unit(ct.astype(np.float64)).astype(np.float32))

    net = net if net is not None else build_model(model_cfg, seed=cfg.seed)
    opt = make_optimizer(net.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(net, norm)
    best_state = copy.deepcopy(net.state_dict())
    n = len(kv)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        net.train()
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            pred = net(x_all[idx])
            loss = smooth_l1(pred, y_all[idx], cfg.smooth_l1_beta)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} "
                                   f"(pairs {order[start:start + cfg.batch_size].tolist()})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        mean = total / n
        result.curve.append((epoch, lr, mean))
        if mean < result.best_loss:
            result.best_loss = mean
            result.best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())
        if progress is not None:
            progress(epoch, lr, mean)
        log.debug("epoch %d lr %.3g loss %.6g", epoch, lr, mean)
    net.load_state_dict(best_state)
    net.eval()
    return result


def predict(net, kv, normalization, batch_size=16):
    """HU volumes for ``kv[N, 2, H, W]``."""
    kv = np.asarray(kv, dtype=np.float32)
    outs = []
    net.eval()
    with torch.no_grad():
        for start in range(0, len(kv), batch_size):
            x = torch.from_numpy(kv[start:start + batch_size] * np.float32(normalization.kv_scale))
            outs.append(net(x.to(next(net.parameters()).dtype)).double().numpy())
    return normalization.unit_to_hu(np.concatenate(outs))


def write_curve(curve, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in curve:
            w.writerow([epoch, repr(float(lr)), repr(float(loss))])
    return path
