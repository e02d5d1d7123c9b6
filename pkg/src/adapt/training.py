"""Optimization machinery shared by all training stages.

AdamW with decoupled weight decay, a per-step learning-rate schedule
(linear warmup then cosine decay to zero), and global gradient-norm
clipping. Everything is deterministic given the parameter dict ordering.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 4
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("optimizer scalars must be non-negative")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")


def warmup_cosine_lr(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear warmup to lr_max, then cosine decay to 0 at total_steps."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    if total_steps == warmup_steps:
        return lr_max
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def default_no_decay(name: str) -> bool:
    """Biases, norm parameters, and slot/type embeddings skip weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or leaf in {"g", "cls", "type_emb"}


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig):
        config.validate()
        self.params = dict(params)
        self.config = config
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        cfg = self.config
        self.t += 1
        b1c = 1.0 - cfg.beta1**self.t
        b2c = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name] = cfg.beta1 * self._m[name] + (1.0 - cfg.beta1) * g
            v = self._v[name] = cfg.beta2 * self._v[name] + (1.0 - cfg.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
            if cfg.weight_decay > 0.0 and not default_no_decay(name):
                update = update + cfg.weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class LossCurve:
    """Per-step training trace; serializes as (step, epoch, tau, loss) CSV."""

    records: list[tuple[int, int, float, float]] = field(default_factory=list)

    def add(self, step: int, epoch: int, tau: float, loss: float) -> None:
        self.records.append((step, epoch, float(tau), float(loss)))

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for _, epoch, _, loss in self.records:
            by_epoch.setdefault(epoch, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def to_csv(self, path: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["step", "epoch", "tau", "loss"])
                for step, epoch, tau, loss in self.records:
                    writer.writerow([step, epoch, repr(tau), repr(loss)])
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
