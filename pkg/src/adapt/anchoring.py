"""Stage 1: contrastive alignment of every modality to the frozen anchor.

The per-pair loss is a temperature-scaled InfoNCE over in-batch cosine
similarities, summed (not averaged) over the batch, applied symmetrically
in both directions, and summed over all non-anchor modalities. Gaussian
noise is added to the non-anchor embedding before the loss to soften the
modality gap; the temperature follows a cosine schedule stepped per
optimization step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor
from .encoders import Encoder, encode_batch, trainable_anchoring_params
from .errors import ConfigError, MissingModalityError
from .nn import cosine_matrix, logsumexp
from .rng import RandomStream
from .training import AdamW, LossCurve, OptimizerConfig, clip_gradients, warmup_cosine_lr


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_max: float
    tau_min: float
    total_steps: int

    def __post_init__(self):
        if not (0.0 < self.tau_min <= self.tau_max):
            raise ConfigError(f"need 0 < tau_min <= tau_max, got {self.tau_min}, {self.tau_max}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")


def tau_at(schedule: TemperatureSchedule, step: int) -> float:
    """Cosine interpolation from tau_max at step 0 to tau_min at total_steps."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    span = schedule.tau_max - schedule.tau_min
    return schedule.tau_min + 0.5 * span * (1.0 + math.cos(math.pi * step / schedule.total_steps))


@dataclass(frozen=True)
class AnchoringConfig:
    tau_max: float = 0.2
    tau_min: float = 0.05
    noise_std: float = 0.1
    batch_size: int = 32
    epochs: int = 12
    train_anchor_head: bool = True

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("contrastive batch needs negatives: batch_size >= 2")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        TemperatureSchedule(self.tau_max, self.tau_min, 1)


def info_nce(anchor_emb, other_emb, tau: float) -> Tensor:
    """Batch-summed InfoNCE on cosine similarities, positives on the diagonal."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a, b = as_tensor(anchor_emb), as_tensor(other_emb)
    logits = cosine_matrix(a, b) * (1.0 / tau)
    B = logits.shape[0]
    diag = (logits * Tensor(np.eye(B))).sum()
    return logsumexp(logits, axis=-1).sum() - diag


def symmetric_loss(anchor_emb, other_emb, tau: float) -> Tensor:
    return info_nce(anchor_emb, other_emb, tau) + info_nce(other_emb, anchor_emb, tau)


def anchoring_loss(
    batch_embeddings: dict[str, Tensor],
    anchor_name: str,
    tau: float,
    noise_std: float,
    rng: RandomStream,
) -> Tensor:
    """Sum of symmetric losses between the anchor and each noised non-anchor modality."""
    if anchor_name not in batch_embeddings:
        raise ValueError(f"anchor modality {anchor_name!r} missing from batch embeddings")
    others = [m for m in batch_embeddings if m != anchor_name]
    if not others:
        raise ValueError("anchoring needs at least one non-anchor modality")
    f_anchor = batch_embeddings[anchor_name]
    total: Tensor | None = None
    for name in others:
        f_m = batch_embeddings[name]
        if noise_std > 0.0:
            f_m = f_m + Tensor(rng.normal(f_m.shape, scale=noise_std))
        term = symmetric_loss(f_anchor, f_m, tau)
        total = term if total is None else total + term
    return total


def _complete_batches(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    """Deterministic chunks; drops a trailing chunk of size < 2 (no negatives)."""
    return [perm[i : i + batch_size] for i in range(0, n, batch_size) if len(perm[i : i + batch_size]) >= 2]


def train_anchoring(
    dataset: list,
    encoders: dict[str, Encoder],
    config: AnchoringConfig,
    opt_config: OptimizerConfig,
    rng: RandomStream,
) -> LossCurve:
    """Train modality alignment on a complete-modality dataset (updates encoders in place)."""
    config.validate()
    names = list(encoders)
    anchor_name = next(n for n in names if encoders[n].spec.is_anchor)
    for obs in dataset:
        missing = [n for n in names if obs.modalities.get(n) is None]
        if missing:
            raise MissingModalityError(
                f"anchoring requires complete modalities; observation {obs.id!r} lacks {missing}"
            )
    if len(dataset) < 2:
        raise ConfigError("anchoring needs at least 2 complete observations")

    shuffle_rng = rng.split("anchor-shuffle")
    noise_rng = rng.split("anchor-noise")
    steps_per_epoch = len(_complete_batches(len(dataset), config.batch_size, np.arange(len(dataset))))
    total_steps = config.epochs * steps_per_epoch
    schedule = TemperatureSchedule(config.tau_max, config.tau_min, total_steps)
    warmup_steps = opt_config.warmup_epochs * steps_per_epoch

    params = trainable_anchoring_params(encoders, config.train_anchor_head)
    opt = AdamW(params, opt_config)
    curve = LossCurve()
    raw = {n: np.stack([obs.modalities[n] for obs in dataset]) for n in names}

    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(len(dataset))
        for idx in _complete_batches(len(dataset), config.batch_size, perm):
            tau = tau_at(schedule, step)
            embs = {n: encode_batch(encoders[n], raw[n][idx]) for n in names}
            loss = anchoring_loss(embs, anchor_name, tau, config.noise_std, noise_rng)
            opt.zero_grad()
            loss.backward()
            clip_gradients(params, opt_config.grad_clip_norm)
            opt.step(warmup_cosine_lr(step, total_steps, warmup_steps, opt_config.lr))
            curve.add(step, epoch, tau, float(loss.data))
            step += 1
    return curve


__all__ = [
    "AnchoringConfig",
    "TemperatureSchedule",
    "anchoring_loss",
    "info_nce",
    "symmetric_loss",
    "tau_at",
    "train_anchoring",
]
