"""Stage 2: the masked multimodal fusion transformer.

Per observation, the per-modality embeddings are stacked under a learned
[CLS] slot (plus learned slot-type embeddings) into F with one row per
slot; unavailable slots are zero rows. Self-attention scores are masked by
Z = outer(avail, avail) and renormalized over the available columns only,
so missing slots neither receive nor emit attention. Masked slots are
re-zeroed after every block so residual paths cannot leak content.

Training is self-supervised: two independently augmented views of each
observation (modality dropout on the availability mask, amplitude-scaled
Gaussian noise on raw 1-d signals) and an InfoNCE loss pulling the two
[CLS] outputs of the same observation together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, Tensor, concat, masked_softmax, matmul, parameter
from .encoders import Encoder, encode_batch
from .errors import ConfigError, ShapeError
from .nn import gelu, layer_norm, linear
from .rng import RandomStream
from .training import AdamW, LossCurve, OptimizerConfig, clip_gradients, warmup_cosine_lr
from .anchoring import TemperatureSchedule, info_nce, tau_at


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 4
    d: int = 32
    d_k: int = 8
    d_v: int = 8
    ffn_multiplier: int = 4

    def validate(self) -> None:
        if self.n_layers < 0 or self.n_heads < 1 or self.ffn_multiplier < 1:
            raise ConfigError("invalid transformer sizes")
        if self.n_heads * self.d_k != self.d or self.n_heads * self.d_v != self.d:
            raise ConfigError(
                f"heads must concatenate back to d: h*d_k={self.n_heads * self.d_k}, "
                f"h*d_v={self.n_heads * self.d_v}, d={self.d}"
            )


@dataclass(frozen=True)
class AvailabilityMask:
    """Slot availability (slot 0 = [CLS], always on) and its pairwise matrix Z."""

    avail: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.avail, dtype=DTYPE)
        if a.ndim != 1 or not np.all((a == 0.0) | (a == 1.0)):
            raise ConfigError("availability must be a binary vector")
        if a[0] != 1.0:
            raise ConfigError("[CLS] slot must always be available")
        object.__setattr__(self, "avail", a)

    @property
    def Z(self) -> np.ndarray:
        return np.outer(self.avail, self.avail)

    @property
    def n_available_modalities(self) -> int:
        return int(self.avail[1:].sum())


def build_mask(modality_avail) -> AvailabilityMask:
    """Prepend the always-on [CLS] slot; error if no modality is available."""
    flags = np.asarray(modality_avail, dtype=DTYPE)
    if flags.ndim != 1 or len(flags) < 1:
        raise ConfigError("modality availability must be a non-empty vector")
    if not np.all((flags == 0.0) | (flags == 1.0)):
        raise ConfigError("availability flags must be binary")
    if flags.sum() == 0:
        raise ConfigError("observation carries no information: all modalities unavailable")
    return AvailabilityMask(avail=np.concatenate([[1.0], flags]))


@dataclass
class TransformerParams:
    """Named tensors; attention/FFN weights are slot-count agnostic, only the
    type-embedding table bounds how many slots one forward pass can take."""

    config: TransformerConfig
    max_slots: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def attention_params(self, layer: int) -> dict[str, Tensor]:
        p = self.tensors
        return {k: p[f"b{layer}.attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def build_transformer(config: TransformerConfig, max_slots: int, rng: RandomStream) -> TransformerParams:
    config.validate()
    if max_slots < 2:
        raise ConfigError("need at least [CLS] plus one modality slot")
    init = rng.split("init").split("transformer")
    d, dff = config.d, config.d * config.ffn_multiplier
    t: dict[str, Tensor] = {
        "cls": parameter(init.normal(d, scale=0.02)),
        "type_emb": parameter(init.normal((max_slots, d), scale=0.02)),
    }
    for i in range(config.n_layers):
        for nm in ("q", "k", "v", "o"):
            t[f"b{i}.attn.w{nm}"] = parameter(init.normal((d, d)) / np.sqrt(d))
            t[f"b{i}.attn.b{nm}"] = parameter(np.zeros(d, dtype=DTYPE))
        t[f"b{i}.ln1.g"] = parameter(np.ones(d, dtype=DTYPE))
        t[f"b{i}.ln1.b"] = parameter(np.zeros(d, dtype=DTYPE))
        t[f"b{i}.ln2.g"] = parameter(np.ones(d, dtype=DTYPE))
        t[f"b{i}.ln2.b"] = parameter(np.zeros(d, dtype=DTYPE))
        t[f"b{i}.ffn.w1"] = parameter(init.normal((d, dff)) / np.sqrt(d))
        t[f"b{i}.ffn.b1"] = parameter(np.zeros(dff, dtype=DTYPE))
        t[f"b{i}.ffn.w2"] = parameter(init.normal((dff, d)) / np.sqrt(dff))
        t[f"b{i}.ffn.b2"] = parameter(np.zeros(d, dtype=DTYPE))
    return TransformerParams(config=config, max_slots=max_slots, tensors=t)


def _attention(x: Tensor, Z: np.ndarray, p: dict[str, Tensor], cfg: TransformerConfig) -> Tensor:
    """Masked multi-head self-attention on (B, S, d) with per-observation Z (B, S, S)."""
    B, S, d = x.shape
    h, dk, dv = cfg.n_heads, cfg.d_k, cfg.d_v

    def split_heads(t: Tensor, dim: int) -> Tensor:
        return t.reshape((B, S, h, dim)).transpose((0, 2, 1, 3))

    q = split_heads(linear(x, p["wq"], p["bq"]), dk)
    k = split_heads(linear(x, p["wk"], p["bk"]), dk)
    v = split_heads(linear(x, p["wv"], p["bv"]), dv)
    scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    weights = masked_softmax(scores, Z[:, None, :, :])  # (B, h, S, S)
    ctx = matmul(weights, v).transpose((0, 2, 1, 3)).reshape((B, S, h * dv))
    out = linear(ctx, p["wo"], p["bo"])
    # rows with avail_i = 0 have all-zero attention weights; kill their output bias too
    return out * Tensor(np.diagonal(Z, axis1=1, axis2=2)[:, :, None])


def masked_attention(F, Z, params: dict[str, Tensor], config: TransformerConfig):
    """One masked multi-head attention pass on a single observation.

    F is (S, d), Z the (S, S) binary availability matrix; unavailable rows
    of the output are exactly zero. Returns an array for array input.
    """
    F_t = F if isinstance(F, Tensor) else Tensor(np.asarray(F, dtype=DTYPE))
    Z_np = np.asarray(Z, dtype=DTYPE)
    if F_t.ndim != 2 or Z_np.shape != (F_t.shape[0], F_t.shape[0]):
        raise ShapeError(f"incompatible shapes: F {F_t.shape}, Z {Z_np.shape}")
    if F_t.shape[1] != config.d:
        raise ShapeError(f"F feature size {F_t.shape[1]} != configured d {config.d}")
    out = _attention(F_t.reshape((1, *F_t.shape)), Z_np[None], params, config)
    out = out.reshape(F_t.shape)
    return out if isinstance(F, Tensor) else out.data


def _block(x: Tensor, Z: np.ndarray, avail_col: np.ndarray, params: TransformerParams, i: int) -> Tensor:
    t = params.tensors
    a = x + _attention(
        layer_norm(x, t[f"b{i}.ln1.g"], t[f"b{i}.ln1.b"]), Z, params.attention_params(i), params.config
    )
    hidden = gelu(linear(layer_norm(a, t[f"b{i}.ln2.g"], t[f"b{i}.ln2.b"]), t[f"b{i}.ffn.w1"], t[f"b{i}.ffn.b1"]))
    out = a + linear(hidden, t[f"b{i}.ffn.w2"], t[f"b{i}.ffn.b2"])
    return out * Tensor(avail_col)  # re-zero masked slots after every block


def transformer_forward(
    F: Tensor | np.ndarray, avail: np.ndarray, params: TransformerParams
) -> tuple[Tensor, Tensor]:
    """Run the block stack on stacked features.

    F is (B, S, d) (or (S, d) for one observation), avail the matching
    (B, S) binary slot availability with avail[:, 0] = 1. Returns the [CLS]
    row outputs (B, d) and all slot outputs (B, S, d).
    """
    x = F if isinstance(F, Tensor) else Tensor(np.asarray(F, dtype=DTYPE))
    single = x.ndim == 2
    if single:
        x = x.reshape((1, *x.shape))
    a = np.asarray(avail, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None]
    B, S, d = x.shape
    if a.shape != (B, S):
        raise ShapeError(f"availability shape {a.shape} does not match features {(B, S)}")
    if np.any(a[:, 0] != 1.0):
        raise ConfigError("[CLS] slot must be available in every observation")
    if S > params.max_slots:
        raise ShapeError(f"{S} slots exceed the type-embedding table ({params.max_slots})")
    if d != params.config.d:
        raise ShapeError(f"feature size {d} != configured d {params.config.d}")

    avail_col = a[:, :, None]
    Z = a[:, :, None] * a[:, None, :]
    x = x * Tensor(avail_col)  # defensive: masked slot content never enters the stack
    for i in range(params.config.n_layers):
        x = _block(x, Z, avail_col, params, i)
    cls_out = x[:, 0, :]
    if single:
        return cls_out.reshape((d,)), x.reshape((S, d))
    return cls_out, x


def stack_features(
    params: TransformerParams, modality_embs: Tensor | np.ndarray, avail: np.ndarray
) -> Tensor:
    """Stack [CLS] + modality embeddings (B, M, d) into F (B, M+1, d).

    Adds the learned type embedding per slot, then zero-fills unavailable
    rows (their embedding content is discarded here, by construction).
    """
    emb = modality_embs if isinstance(modality_embs, Tensor) else Tensor(np.asarray(modality_embs, dtype=DTYPE))
    B, M, d = emb.shape
    S = M + 1
    if S > params.max_slots:
        raise ShapeError(f"{M} modalities exceed the type-embedding table ({params.max_slots})")
    a = np.asarray(avail, dtype=DTYPE)
    if a.shape != (B, S):
        raise ShapeError(f"availability shape {a.shape}, expected {(B, S)}")
    cls_rows = params.tensors["cls"].reshape((1, 1, d)) + Tensor(np.zeros((B, 1, d), dtype=DTYPE))
    stacked = concat([cls_rows, emb], axis=1)
    typed = stacked + params.tensors["type_emb"][:S].reshape((1, S, d))
    return typed * Tensor(a[:, :, None])


def modality_dropout(mask: AvailabilityMask, n_modalities: int, rng: RandomStream) -> AvailabilityMask:
    """Hide k ~ Uniform{0..M-1} available modalities, never the last one or [CLS]."""
    if mask.n_available_modalities < 1:
        raise ConfigError("mask has no available modality")
    k = int(rng.integers(0, n_modalities))
    flags = mask.avail.copy()
    available = np.flatnonzero(flags[1:] == 1.0) + 1
    n_drop = min(k, len(available) - 1)
    if n_drop > 0:
        drop = rng.choice(available, size=n_drop, replace=False)
        flags[drop] = 0.0
    return AvailabilityMask(avail=flags)


@dataclass(frozen=True)
class FusionTrainConfig:
    epochs: int = 12
    batch_size: int = 32
    tau_max: float = 0.2
    tau_min: float = 0.05
    noise_prob: float = 0.5
    dropout_prob: float = 0.5
    noise_scale: float = 0.1
    freeze_encoders: bool = True

    def validate(self) -> None:
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigError("fusion training needs batch_size >= 2 and epochs >= 1")
        for p in (self.noise_prob, self.dropout_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("augmentation probabilities must be in [0, 1]")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")


@dataclass
class View:
    """One augmented view of a batch: embeddings per modality slot + availability."""

    embeddings: Tensor  # (B, M, d)
    avail: np.ndarray  # (B, M+1)


def _augment_observation(
    obs, names: list[str], kinds: dict[str, str], cfg: FusionTrainConfig, rng: RandomStream
) -> tuple[dict[str, np.ndarray | None], np.ndarray]:
    """Apply (noise, then modality dropout), each with its own coin, to one view."""
    raws: dict[str, np.ndarray | None] = {}
    for n in names:
        x = obs.modalities.get(n)
        raws[n] = None if x is None else np.asarray(x, dtype=DTYPE)
    if cfg.noise_prob > 0.0 and rng.random() < cfg.noise_prob:
        for n in names:
            if kinds[n] == "sequence-1d" and raws[n] is not None:
                sigma = cfg.noise_scale * float(raws[n].std())
                if sigma > 0.0:
                    raws[n] = raws[n] + rng.normal(raws[n].shape, scale=sigma)
    mask = build_mask([0.0 if raws[n] is None else 1.0 for n in names])
    if cfg.dropout_prob > 0.0 and rng.random() < cfg.dropout_prob:
        mask = modality_dropout(mask, len(names), rng)
    return raws, mask.avail


def _encode_view(
    raws_per_obs: list[dict[str, np.ndarray | None]],
    avail: np.ndarray,
    encoders: dict[str, Encoder],
    names: list[str],
    with_grad: bool,
) -> Tensor:
    """Encode available slots per modality; unavailable rows are zeros."""
    B = len(raws_per_obs)
    d = encoders[names[0]].config.d
    columns: list[Tensor] = []
    for j, n in enumerate(names):
        rows = np.flatnonzero(avail[:, j + 1] == 1.0)
        if len(rows) == 0:
            columns.append(Tensor(np.zeros((B, 1, d), dtype=DTYPE)))
            continue
        batch = np.stack([raws_per_obs[i][n] for i in rows])
        emb = encode_batch(encoders[n], batch)
        if not with_grad:
            emb = emb.detach()
        select = np.zeros((B, len(rows)), dtype=DTYPE)
        select[rows, np.arange(len(rows))] = 1.0
        full = matmul(Tensor(select), emb)  # scatter rows back, differentiable
        columns.append(full.reshape((B, 1, d)))
    return concat(columns, axis=1)


def make_views(
    batch: list,
    encoders: dict[str, Encoder],
    config: FusionTrainConfig,
    rng: RandomStream,
    with_grad: bool = False,
) -> tuple[View, View]:
    """Two independently augmented views of a batch of observations."""
    if not batch:
        raise ValueError("empty batch")
    names = list(encoders)
    kinds = {n: encoders[n].spec.kind for n in names}
    views: list[View] = []
    per_view_raws: list[list[dict]] = [[], []]
    per_view_avail: list[list[np.ndarray]] = [[], []]
    for obs in batch:
        for v in range(2):
            raws, avail = _augment_observation(obs, names, kinds, config, rng)
            per_view_raws[v].append(raws)
            per_view_avail[v].append(avail)
    for v in range(2):
        avail = np.stack(per_view_avail[v])
        emb = _encode_view(per_view_raws[v], avail, encoders, names, with_grad)
        views.append(View(embeddings=emb, avail=avail))
    return views[0], views[1]


def fusion_loss(cls_a, cls_b, tau: float) -> Tensor:
    """Multi-view InfoNCE between the two views' [CLS] outputs (one direction)."""
    return info_nce(cls_a, cls_b, tau)


def train_fusion(
    dataset: list,
    encoders: dict[str, Encoder],
    params: TransformerParams,
    config: FusionTrainConfig,
    opt_config: OptimizerConfig,
    rng: RandomStream,
) -> LossCurve:
    """Train the fusion transformer with the two-view objective (params updated in place)."""
    config.validate()
    names = list(encoders)
    for obs in dataset:
        if all(obs.modalities.get(n) is None for n in names):
            raise ConfigError(f"observation {obs.id!r} has no available modality")
    if len(dataset) < 2:
        raise ConfigError("fusion training needs at least 2 observations")

    from .encoders import set_encoders_trainable  # local to avoid import noise at module top

    set_encoders_trainable(encoders, not config.freeze_encoders)
    trainable = dict(params.tensors)
    if not config.freeze_encoders:
        from .encoders import trainable_anchoring_params

        trainable.update(trainable_anchoring_params(encoders))

    shuffle_rng = rng.split("fusion-shuffle")
    aug_rng = rng.split("fusion-aug")
    idx_all = np.arange(len(dataset))
    batches = [idx_all[i : i + config.batch_size] for i in range(0, len(dataset), config.batch_size)]
    steps_per_epoch = len([b for b in batches if len(b) >= 2])
    total_steps = config.epochs * steps_per_epoch
    schedule = TemperatureSchedule(config.tau_max, config.tau_min, total_steps)
    warmup_steps = opt_config.warmup_epochs * steps_per_epoch

    opt = AdamW(trainable, opt_config)
    curve = LossCurve()
    step = 0
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(len(dataset))
        for start in range(0, len(dataset), config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            batch = [dataset[i] for i in idx]
            view_a, view_b = make_views(batch, encoders, config, aug_rng, with_grad=not config.freeze_encoders)
            tau = tau_at(schedule, step)
            cls_a, _ = transformer_forward(stack_features(params, view_a.embeddings, view_a.avail), view_a.avail, params)
            cls_b, _ = transformer_forward(stack_features(params, view_b.embeddings, view_b.avail), view_b.avail, params)
            loss = fusion_loss(cls_a, cls_b, tau)
            opt.zero_grad()
            loss.backward()
            clip_gradients(trainable, opt_config.grad_clip_norm)
            opt.step(warmup_cosine_lr(step, total_steps, warmup_steps, opt_config.lr))
            curve.add(step, epoch, tau, float(loss.data))
            step += 1
    set_encoders_trainable(encoders, True)
    return curve
