"""Self-describing JSON checkpoint container.

One format for every trained component: a config dict plus named tensors,
each stored as base64 little-endian bytes with dtype and shape so loads
round-trip bit-exactly. Writes are atomic (temp file + rename) and key
order is sorted, so identical models serialize to identical bytes.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

FORMAT = "adapt-ckpt-v1"


def _encode_tensor(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_tensor(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()


def save_checkpoint(path: str, kind: str, config: dict, tensors: dict[str, np.ndarray | Tensor]) -> None:
    payload = {
        "format": FORMAT,
        "kind": kind,
        "config": config,
        "tensors": {
            name: _encode_tensor(t.data if isinstance(t, Tensor) else np.asarray(t))
            for name, t in sorted(tensors.items())
        },
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT:
        raise ConfigError(f"{path!r} is not a {FORMAT} checkpoint")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise ConfigError(f"{path!r} holds a {payload.get('kind')!r} checkpoint, expected {expect_kind!r}")
    tensors = {name: _decode_tensor(entry) for name, entry in payload["tensors"].items()}
    return payload["config"], tensors
