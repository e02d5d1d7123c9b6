"""Linear [CLS] probe and the two classical fusion baselines.

The probe is a single linear layer trained with class-weighted (balanced)
cross-entropy on frozen [CLS] representations. Feature-level fusion
concatenates all modality embeddings into one vector for a 2-layer MLP and
by construction cannot ingest incomplete samples. Decision-level fusion
trains one regularized linear classifier per modality and combines their
posteriors with one of four ensemble rules (sum, average, product,
maximum); the rule is picked on the validation split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, Tensor, parameter
from .errors import ConfigError, MissingModalityError
from .nn import gelu, gelu_np, linear, logsumexp, one_hot, softmax_np
from .rng import RandomStream
from .training import AdamW, OptimizerConfig, clip_gradients, warmup_cosine_lr

DECISION_RULES = ("sum", "average", "product", "maximum")


@dataclass(frozen=True)
class ProbeConfig:
    n_classes: int = 2
    class_weights: tuple[float, ...] | None = None  # None -> balanced from labels
    epochs: int = 300
    lr: float = 1e-2

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.class_weights is not None:
            if len(self.class_weights) != self.n_classes:
                raise ConfigError("class_weights length must equal n_classes")
            if any(w <= 0 for w in self.class_weights):
                raise ConfigError("class_weights must be positive")


def balanced_class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse class frequency, normalized to mean 1."""
    counts = np.bincount(labels, minlength=n_classes).astype(DTYPE)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ConfigError(f"classes {missing} absent from training labels")
    w = 1.0 / counts
    return w / w.mean()


def weighted_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean over the batch of weights[y_i] * (-log softmax(logits_i)[y_i])."""
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=DTYPE)
    B, C = logits.shape
    if len(weights) != C:
        raise ConfigError(f"{len(weights)} weights for {C} classes")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels outside [0, {C}): {sorted(set(labels.tolist()))}")
    lse = logsumexp(logits, axis=-1)
    picked = (logits * Tensor(one_hot(labels, C))).sum(axis=-1)
    return ((lse - picked) * Tensor(weights[labels])).sum() * (1.0 / B)


@dataclass
class LinearClassifier:
    w: np.ndarray  # (d, C)
    b: np.ndarray  # (C,)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=DTYPE) @ self.w + self.b

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax_np(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


def _resolve_weights(labels: np.ndarray, config: ProbeConfig) -> np.ndarray:
    if config.class_weights is not None:
        return np.asarray(config.class_weights, dtype=DTYPE)
    return balanced_class_weights(labels, config.n_classes)


def _fit_softmax_params(
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    params: dict[str, Tensor],
    forward,
    epochs: int,
    lr: float,
    weight_decay: float,
) -> None:
    """Full-batch AdamW on a small differentiable classifier head."""
    opt_cfg = OptimizerConfig(lr=lr, weight_decay=weight_decay, warmup_epochs=0, grad_clip_norm=10.0)
    opt = AdamW(params, opt_cfg)
    x = Tensor(np.asarray(features, dtype=DTYPE))
    for step in range(epochs):
        loss = weighted_cross_entropy(forward(x), labels, weights)
        opt.zero_grad()
        loss.backward()
        clip_gradients(params, opt_cfg.grad_clip_norm)
        opt.step(warmup_cosine_lr(step, epochs, 0, lr))


def train_probe(
    cls_embeddings: np.ndarray, labels: np.ndarray, config: ProbeConfig, rng: RandomStream
) -> LinearClassifier:
    """Train the linear probe on frozen [CLS] embeddings."""
    config.validate()
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ConfigError("degenerate training set: only one class present")
    weights = _resolve_weights(labels, config)
    d = cls_embeddings.shape[1]
    init = rng.split("init").split("probe")
    params = {
        "w": parameter(init.normal((d, config.n_classes)) / np.sqrt(d)),
        "b": parameter(np.zeros(config.n_classes, dtype=DTYPE)),
    }
    _fit_softmax_params(
        cls_embeddings, labels, weights, params,
        lambda x: linear(x, params["w"], params["b"]),
        config.epochs, config.lr, weight_decay=0.0,
    )
    return LinearClassifier(w=params["w"].data, b=params["b"].data)


@dataclass
class MLPClassifier:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=DTYPE) @ self.w1 + self.b1
        return gelu_np(h) @ self.w2 + self.b2

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax_np(self.logits(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


@dataclass(frozen=True)
class BaselineConfig:
    n_classes: int = 2
    class_weights: tuple[float, ...] | None = None
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 0.05  # the "regularized" in regularized linear models

    def as_probe(self) -> ProbeConfig:
        return ProbeConfig(self.n_classes, self.class_weights, self.epochs, self.lr)


def feature_fusion_baseline(
    embeddings_by_modality: list[np.ndarray],
    labels: np.ndarray,
    config: BaselineConfig,
    rng: RandomStream,
) -> MLPClassifier:
    """Concatenate modality embeddings and fit a 2-layer MLP (hidden = 2*d).

    Inputs must be complete: pass one (N, d) block per modality with no
    gaps. Availability handling is the caller's contract; see
    :class:`FeatureFusionPredictor` for the observation-facing guard.
    """
    config.as_probe().validate()
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ConfigError("degenerate training set: only one class present")
    n = len(labels)
    for block in embeddings_by_modality:
        if block.shape[0] != n:
            raise MissingModalityError(
                "feature-level fusion baseline requires complete modalities for every sample"
            )
        if not np.isfinite(block).all():
            raise MissingModalityError("feature-level fusion received missing (non-finite) embeddings")
    x = np.concatenate(embeddings_by_modality, axis=1)
    d = embeddings_by_modality[0].shape[1]
    hidden = 2 * d
    init = rng.split("init").split("feature-fusion")
    params = {
        "w1": parameter(init.normal((x.shape[1], hidden)) / np.sqrt(x.shape[1])),
        "b1": parameter(np.zeros(hidden, dtype=DTYPE)),
        "w2": parameter(init.normal((hidden, config.n_classes)) / np.sqrt(hidden)),
        "b2": parameter(np.zeros(config.n_classes, dtype=DTYPE)),
    }
    weights = (
        np.asarray(config.class_weights, dtype=DTYPE)
        if config.class_weights is not None
        else balanced_class_weights(labels, config.n_classes)
    )
    _fit_softmax_params(
        x, labels, weights, params,
        lambda t: linear(gelu(linear(t, params["w1"], params["b1"])), params["w2"], params["b2"]),
        config.epochs, config.lr, config.weight_decay,
    )
    return MLPClassifier(params["w1"].data, params["b1"].data, params["w2"].data, params["b2"].data)


def decision_fusion(posteriors: list[np.ndarray], rule: str) -> int:
    """Combine per-modality class posteriors with an ensemble rule; argmax wins."""
    if rule not in DECISION_RULES:
        raise ConfigError(f"unknown decision rule {rule!r}; expected one of {DECISION_RULES}")
    if not posteriors:
        raise ValueError("decision fusion needs at least one posterior vector")
    stack = np.stack([np.asarray(p, dtype=DTYPE) for p in posteriors])
    if stack.ndim != 2:
        raise ValueError("posterior vectors must share one length")
    sums = stack.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError(f"posteriors must sum to 1 (got sums {sums})")
    if rule == "sum":
        combined = stack.sum(axis=0)
    elif rule == "average":
        combined = stack.mean(axis=0)
    elif rule == "product":
        combined = stack.prod(axis=0)
    else:
        combined = stack.max(axis=0)
    return int(combined.argmax())


@dataclass
class DecisionFusionModel:
    """Per-modality linear classifiers plus the rule selected on validation."""

    classifiers: dict[str, LinearClassifier]
    rule: str = "sum"
    per_rule_validation: dict[str, float] = field(default_factory=dict)

    def predict_one(self, embeddings: dict[str, np.ndarray], rule: str | None = None) -> int:
        available = [n for n in self.classifiers if n in embeddings]
        if not available:
            raise MissingModalityError("decision fusion: no modality posterior available")
        posteriors = [self.classifiers[n].predict_proba(embeddings[n][None])[0] for n in available]
        return decision_fusion(posteriors, rule or self.rule)


def train_decision_fusion(
    embeddings_by_modality: dict[str, np.ndarray],
    labels: np.ndarray,
    config: BaselineConfig,
    rng: RandomStream,
) -> DecisionFusionModel:
    """One regularized linear classifier per modality embedding matrix."""
    classifiers: dict[str, LinearClassifier] = {}
    for name, feats in embeddings_by_modality.items():
        sub = rng.split(f"decision-{name}")
        weights = (
            np.asarray(config.class_weights, dtype=DTYPE)
            if config.class_weights is not None
            else balanced_class_weights(np.asarray(labels), config.n_classes)
        )
        d = feats.shape[1]
        init = sub.split("init")
        params = {
            "w": parameter(init.normal((d, config.n_classes)) / np.sqrt(d)),
            "b": parameter(np.zeros(config.n_classes, dtype=DTYPE)),
        }
        _fit_softmax_params(
            feats, np.asarray(labels), weights, params,
            lambda x, p=params: linear(x, p["w"], p["b"]),
            config.epochs, config.lr, config.weight_decay,
        )
        classifiers[name] = LinearClassifier(w=params["w"].data, b=params["b"].data)
    return DecisionFusionModel(classifiers=classifiers)


def select_best_rule(
    model: DecisionFusionModel,
    val_embeddings: dict[str, np.ndarray],
    val_labels: np.ndarray,
    score_fn,
) -> str:
    """Pick the ensemble rule maximizing ``score_fn(preds, labels)`` on validation."""
    n = len(val_labels)
    best_rule, best_score = "sum", -np.inf
    for rule in DECISION_RULES:
        preds = np.array(
            [
                model.predict_one({m: val_embeddings[m][i] for m in val_embeddings}, rule)
                for i in range(n)
            ]
        )
        score = float(score_fn(preds, val_labels))
        model.per_rule_validation[rule] = score
        if score > best_score:
            best_rule, best_score = rule, score
    model.rule = best_rule
    return best_rule
