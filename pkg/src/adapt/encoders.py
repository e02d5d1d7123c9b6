"""Modality-specific encoders with linear projection heads.

Each modality kind gets a small trainable body: a 2-layer MLP for flat
feature vectors, a 3-layer strided 1-D conv stack with global average
pooling for sequences, and a 2-layer strided 2-D conv stack for grids.
A per-modality linear head maps the body output to the shared embedding
size ``d``. The anchor modality's body is initialized and then frozen,
standing in for a pretrained encoder; its head stays trainable (switchable
at the anchoring stage).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, Tensor, parameter
from .errors import ConfigError, ShapeError
from .nn import conv1d, conv2d, gelu, linear
from .rng import RandomStream

KINDS = ("feature-vector", "sequence-1d", "grid-2d")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    input_shape: tuple[int, ...]
    is_anchor: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"modality {self.name!r}: unknown kind {self.kind!r}")
        expected_ndim = {"feature-vector": 1, "sequence-1d": 1, "grid-2d": 2}[self.kind]
        if len(self.input_shape) != expected_ndim:
            raise ConfigError(
                f"modality {self.name!r}: kind {self.kind} needs {expected_ndim}-d input, "
                f"got shape {self.input_shape}"
            )


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalitySpec, ...]
    d: int = 32
    mlp_hidden: int = 64
    conv1d_channels: tuple[int, ...] = (8, 16, 32)
    conv1d_kernel: int = 7
    conv1d_stride: int = 2
    conv2d_channels: tuple[int, ...] = (8, 16)
    conv2d_kernel: int = 3
    conv2d_stride: int = 2

    def validate(self) -> None:
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate modality names: {names}")
        anchors = [m for m in self.modalities if m.is_anchor]
        if len(anchors) != 1:
            raise ConfigError(f"exactly one anchor modality required, got {len(anchors)}")
        if self.d < 1:
            raise ConfigError("embedding size d must be positive")
        for spec in self.modalities:
            if spec.kind == "sequence-1d":
                _check_conv_depth(spec, self.conv1d_channels, self.conv1d_kernel, self.conv1d_stride)
            elif spec.kind == "grid-2d":
                for dim in spec.input_shape:
                    _check_conv_depth(spec, self.conv2d_channels, self.conv2d_kernel, self.conv2d_stride, dim)

    @property
    def anchor(self) -> ModalitySpec:
        return next(m for m in self.modalities if m.is_anchor)

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]


def _check_conv_depth(spec, channels, kernel, stride, length=None) -> int:
    n = spec.input_shape[0] if length is None else length
    for _ in channels:
        if n < kernel:
            raise ConfigError(
                f"modality {spec.name!r}: input shape {spec.input_shape} too small for "
                f"{len(channels)} conv layers (kernel {kernel}, stride {stride})"
            )
        n = (n - kernel) // stride + 1
    return n


@dataclass
class Encoder:
    """Body + projection head for a single modality; parameters are named Tensors."""

    spec: ModalitySpec
    params: dict[str, Tensor]
    frozen: bool
    config: ModelConfig

    def body_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("body.")]

    def head_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("head.")]


def _init_linear(rng: RandomStream, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    w = parameter(rng.normal((n_in, n_out)) / np.sqrt(n_in))
    b = parameter(np.zeros(n_out, dtype=DTYPE))
    return w, b


def _init_conv(rng: RandomStream, shape: tuple[int, ...]) -> tuple[Tensor, Tensor]:
    fan_in = int(np.prod(shape[1:]))
    w = parameter(rng.normal(shape) / np.sqrt(fan_in))
    b = parameter(np.zeros(shape[0], dtype=DTYPE))
    return w, b


def build_encoders(config: ModelConfig, rng: RandomStream) -> dict[str, Encoder]:
    """One encoder per modality, anchor body frozen; init from the 'init' sub-stream."""
    config.validate()
    init_rng = rng.split("init")
    encoders: dict[str, Encoder] = {}
    for spec in config.modalities:
        erng = init_rng.split(spec.name)
        params: dict[str, Tensor] = {}
        if spec.kind == "feature-vector":
            n_in = spec.input_shape[0]
            params["body.l1.w"], params["body.l1.b"] = _init_linear(erng, n_in, config.mlp_hidden)
            params["body.l2.w"], params["body.l2.b"] = _init_linear(
                erng, config.mlp_hidden, config.mlp_hidden
            )
            body_out = config.mlp_hidden
        elif spec.kind == "sequence-1d":
            c_in = 1
            for i, c_out in enumerate(config.conv1d_channels, start=1):
                params[f"body.c{i}.w"], params[f"body.c{i}.b"] = _init_conv(
                    erng, (c_out, c_in, config.conv1d_kernel)
                )
                c_in = c_out
            body_out = config.conv1d_channels[-1]
        else:
            c_in = 1
            for i, c_out in enumerate(config.conv2d_channels, start=1):
                params[f"body.c{i}.w"], params[f"body.c{i}.b"] = _init_conv(
                    erng, (c_out, c_in, config.conv2d_kernel, config.conv2d_kernel)
                )
                c_in = c_out
            body_out = config.conv2d_channels[-1]
        params["head.w"], params["head.b"] = _init_linear(erng, body_out, config.d)

        frozen = spec.is_anchor
        if frozen:
            for name in list(params):
                if name.startswith("body."):
                    params[name].requires_grad = False
        encoders[spec.name] = Encoder(spec=spec, params=params, frozen=frozen, config=config)
    return encoders


def encode_batch(enc: Encoder, raw: np.ndarray | Tensor) -> Tensor:
    """Encode a batch of raw inputs, (B, *input_shape) -> (B, d)."""
    x = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw, dtype=DTYPE))
    got = tuple(x.shape[1:])
    if got != enc.spec.input_shape:
        raise ShapeError(
            f"modality {enc.spec.name!r}: expected input shape {enc.spec.input_shape}, got {got}"
        )
    p, cfg = enc.params, enc.config
    B = x.shape[0]
    if enc.spec.kind == "feature-vector":
        h = gelu(linear(x, p["body.l1.w"], p["body.l1.b"]))
        h = gelu(linear(h, p["body.l2.w"], p["body.l2.b"]))
    elif enc.spec.kind == "sequence-1d":
        h = x.reshape((B, 1, x.shape[1]))
        for i in range(1, len(cfg.conv1d_channels) + 1):
            h = gelu(conv1d(h, p[f"body.c{i}.w"], p[f"body.c{i}.b"], cfg.conv1d_stride))
        h = h.mean(axis=2)
    else:
        h = x.reshape((B, 1, x.shape[1], x.shape[2]))
        for i in range(1, len(cfg.conv2d_channels) + 1):
            h = gelu(conv2d(h, p[f"body.c{i}.w"], p[f"body.c{i}.b"], cfg.conv2d_stride))
        h = h.mean(axis=(2, 3))
    return linear(h, p["head.w"], p["head.b"])


def encode(enc: Encoder, raw: np.ndarray) -> np.ndarray:
    """Encode one observation's raw modality input to a d-vector."""
    out = encode_batch(enc, np.asarray(raw, dtype=DTYPE)[None]).data[0]
    if not np.isfinite(out).all():
        raise ValueError(f"modality {enc.spec.name!r}: non-finite embedding")
    return out


def trainable_anchoring_params(
    encoders: dict[str, Encoder], train_anchor_head: bool = True
) -> dict[str, Tensor]:
    """Parameters updated in stage 1: all non-anchor tensors, plus the anchor head if enabled."""
    out: dict[str, Tensor] = {}
    for name, enc in encoders.items():
        for pname, t in enc.params.items():
            if enc.frozen and pname.startswith("body."):
                continue
            if enc.frozen and not train_anchor_head:
                t.requires_grad = False
                continue
            out[f"{name}.{pname}"] = t
    return out


def set_encoders_trainable(encoders: dict[str, Encoder], trainable: bool) -> None:
    """Toggle gradient tracking for all non-frozen-body parameters (fusion stage switch)."""
    for enc in encoders.values():
        for pname, t in enc.params.items():
            if enc.frozen and pname.startswith("body."):
                continue
            t.requires_grad = trainable
