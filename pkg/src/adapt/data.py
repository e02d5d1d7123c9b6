"""Synthetic multimodal dataset generation and on-disk format.

Every observation carries one labeled window: the class is encoded
redundantly into each modality as a class prototype plus Gaussian noise,
so any single modality is informative on its own. Missingness is i.i.d.
per modality at configurable rates (at least one modality must have rate
zero so every observation keeps information). Subjects are split 6:2:2
with no subject crossing splits.

Separate named rng sub-streams drive prototypes, labels, signal noise,
missingness, and the split, so changing only a missing rate leaves labels
and signal contents untouched.

On disk: one JSON-Lines file per split, one object per observation
``{id, subject_id, label, modalities: {name: nested-list | null}}``,
plus a ``manifest.json`` with the generator config and modality specs.
Floats serialize with full round-trip precision; writes are atomic.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE
from .encoders import ModalitySpec
from .errors import ConfigError
from .rng import RandomStream


@dataclass(frozen=True)
class AlterationEvent:
    t_start: float
    t_end: float

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ConfigError(f"event needs t_start < t_end, got ({self.t_start}, {self.t_end})")


def label_window(t: float, n: float, events: list[AlterationEvent]) -> int:
    """1 iff the window [t-n, t] lies inside some alteration event, else 0."""
    if n <= 0:
        raise ValueError(f"window length must be positive, got {n}")
    for e in events:
        if t - n >= e.t_start and t <= e.t_end:
            return 1
    return 0


@dataclass
class Observation:
    id: str
    subject_id: str
    label: int
    modalities: dict[str, np.ndarray | None]

    def available(self, names: list[str]) -> np.ndarray:
        return np.array([0.0 if self.modalities.get(n) is None else 1.0 for n in names], dtype=DTYPE)

    def n_present(self) -> int:
        return sum(1 for v in self.modalities.values() if v is not None)


DEFAULT_MODALITIES = (
    ModalitySpec("video", "feature-vector", (24,), is_anchor=True),
    ModalitySpec("audio", "grid-2d", (16, 16)),
    ModalitySpec("biosignal", "sequence-1d", (64,)),
)


@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int = 30
    n_observations: int = 600
    modality_specs: tuple[ModalitySpec, ...] = DEFAULT_MODALITIES
    missing_rate: dict[str, float] = field(default_factory=lambda: {"video": 0.9})
    positive_fraction: float = 1.0 / 51.0
    window_seconds: float = 3.1
    signal_snr: float = 1.5
    seed: int = 1999

    def validate(self) -> None:
        if self.n_subjects < 5:
            raise ConfigError("need n_subjects >= 5 for a meaningful 6:2:2 split")
        if self.n_observations < self.n_subjects:
            raise ConfigError("need at least one observation per subject")
        names = [m.name for m in self.modality_specs]
        if len(set(names)) != len(names) or not names:
            raise ConfigError("modality names must be unique and non-empty")
        for name, rate in self.missing_rate.items():
            if name not in names:
                raise ConfigError(f"missing_rate references unknown modality {name!r}")
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"missing_rate for {name!r} must be in [0, 1], got {rate}")
        if not any(self.missing_rate.get(n, 0.0) == 0.0 for n in names):
            raise ConfigError("at least one modality must be always present (missing rate 0)")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ConfigError("positive_fraction must be in (0, 1)")
        if self.window_seconds <= 0 or self.signal_snr <= 0:
            raise ConfigError("window_seconds and signal_snr must be positive")


@dataclass
class DatasetBundle:
    train: list[Observation]
    val: list[Observation]
    test: list[Observation]
    manifest: dict

    def split(self, name: str) -> list[Observation]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _smooth(x: np.ndarray, width: int = 9) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def _class_prototypes(spec: ModalitySpec, rng: RandomStream, n_classes: int) -> list[np.ndarray]:
    protos = []
    for _ in range(n_classes):
        p = rng.normal(spec.input_shape)
        if spec.kind == "sequence-1d":
            p = _smooth(p)
            p = p / max(p.std(), 1e-9)
        protos.append(p)
    return protos


def _subject_splits(n_subjects: int, rng: RandomStream) -> dict[str, list[int]]:
    order = rng.permutation(n_subjects)
    n_test = max(1, round(0.2 * n_subjects))
    n_val = max(1, round(0.2 * n_subjects))
    n_train = n_subjects - n_val - n_test
    if n_train < 1:
        raise ConfigError("not enough subjects for a 6:2:2 split")
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }


def generate(config: GeneratorConfig) -> DatasetBundle:
    """Build the synthetic train/val/test observations and manifest."""
    config.validate()
    rng = RandomStream(config.seed)
    proto_rng = rng.split("data").split("prototypes")
    label_rng = rng.split("data").split("labels")
    signal_rng = rng.split("data").split("signal")
    missing_rng = rng.split("data").split("missing")
    split_rng = rng.split("data").split("split")

    specs = list(config.modality_specs)
    protos = {s.name: _class_prototypes(s, proto_rng.split(s.name), 2) for s in specs}
    # isotropic noise projects to std sigma on the discriminant axis, so the
    # class margin ||p0 - p1|| / 2 sits signal_snr sigmas from each prototype
    noise_std = {
        s.name: float(np.linalg.norm(protos[s.name][0] - protos[s.name][1])) / (2.0 * config.signal_snr)
        for s in specs
    }

    labels = (label_rng.random(config.n_observations) < config.positive_fraction).astype(int)
    subject_of = np.arange(config.n_observations) % config.n_subjects
    splits = _subject_splits(config.n_subjects, split_rng)
    subject_split = {}
    for split_name, subject_ids in splits.items():
        for sid in subject_ids:
            subject_split[sid] = split_name

    out: dict[str, list[Observation]] = {"train": [], "val": [], "test": []}
    per_subject_counter: dict[int, int] = {}
    for i in range(config.n_observations):
        sid = int(subject_of[i])
        k = per_subject_counter.get(sid, 0)
        per_subject_counter[sid] = k + 1
        modalities: dict[str, np.ndarray | None] = {}
        for s in specs:
            signal = protos[s.name][labels[i]] + signal_rng.normal(s.input_shape, scale=noise_std[s.name])
            rate = config.missing_rate.get(s.name, 0.0)
            absent = missing_rng.random() < rate  # draw always, keeps streams aligned
            modalities[s.name] = None if absent else signal.astype(DTYPE)
        obs = Observation(
            id=f"s{sid:03d}-{k:04d}",
            subject_id=f"s{sid:03d}",
            label=int(labels[i]),
            modalities=modalities,
        )
        out[subject_split[sid]].append(obs)

    manifest = {
        "generator": {
            "n_subjects": config.n_subjects,
            "n_observations": config.n_observations,
            "missing_rate": dict(sorted(config.missing_rate.items())),
            "positive_fraction": config.positive_fraction,
            "window_seconds": config.window_seconds,
            "signal_snr": config.signal_snr,
            "seed": config.seed,
        },
        "modalities": [
            {
                "name": s.name,
                "kind": s.kind,
                "input_shape": list(s.input_shape),
                "is_anchor": s.is_anchor,
            }
            for s in specs
        ],
        "splits": {k: len(v) for k, v in out.items()},
    }
    return DatasetBundle(train=out["train"], val=out["val"], test=out["test"], manifest=manifest)


def filter_complete(observations: list[Observation]) -> list[Observation]:
    """Keep only observations with every modality present."""
    if not observations:
        raise ConfigError("empty dataset")
    names = list(observations[0].modalities)
    complete = [o for o in observations if all(o.modalities[n] is not None for n in names)]
    if not complete:
        counts = {n: sum(1 for o in observations if o.modalities[n] is None) for n in names}
        raise ConfigError(f"no complete-modality observations; absent counts per modality: {counts}")
    return complete


def drop_modalities(observations: list[Observation], names: list[str]) -> list[Observation]:
    """Mark the named modalities absent everywhere (test-time scenario construction)."""
    if not observations:
        return []
    known = set(observations[0].modalities)
    unknown = [n for n in names if n not in known]
    if unknown:
        raise ConfigError(f"cannot drop unknown modalities {unknown}; dataset has {sorted(known)}")
    dropped = set(names)
    for o in observations:
        remaining = [n for n in known if n not in dropped and o.modalities[n] is not None]
        if not remaining:
            raise ConfigError(
                f"dropping {sorted(dropped)} would leave observation {o.id!r} with no modality"
            )
    return [
        Observation(
            id=o.id,
            subject_id=o.subject_id,
            label=o.label,
            modalities={n: (None if n in dropped else v) for n, v in o.modalities.items()},
        )
        for o in observations
    ]


# -- serialization ------------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _obs_to_json(o: Observation) -> str:
    return json.dumps(
        {
            "id": o.id,
            "subject_id": o.subject_id,
            "label": o.label,
            "modalities": {
                n: (None if v is None else v.tolist()) for n, v in sorted(o.modalities.items())
            },
        },
        sort_keys=True,
    )


def save_dataset(bundle: DatasetBundle, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "val", "test"):
        lines = [_obs_to_json(o) for o in bundle.split(split)]
        _atomic_write(os.path.join(out_dir, f"{split}.jsonl"), "\n".join(lines) + "\n")
    _atomic_write(
        os.path.join(out_dir, "manifest.json"),
        json.dumps(bundle.manifest, sort_keys=True, indent=2) + "\n",
    )


def load_dataset(data_dir: str) -> DatasetBundle:
    manifest_path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no manifest.json in {data_dir!r}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    splits = {}
    order = [m["name"] for m in manifest["modalities"]]
    for split in ("train", "val", "test"):
        path = os.path.join(data_dir, f"{split}.jsonl")
        observations = []
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                modalities = {
                    n: (None if rec["modalities"][n] is None else np.asarray(rec["modalities"][n], dtype=DTYPE))
                    for n in order
                }
                observations.append(
                    Observation(
                        id=rec["id"],
                        subject_id=rec["subject_id"],
                        label=int(rec["label"]),
                        modalities=modalities,
                    )
                )
        splits[split] = observations
    return DatasetBundle(train=splits["train"], val=splits["val"], test=splits["test"], manifest=manifest)


def specs_from_manifest(manifest: dict) -> tuple[ModalitySpec, ...]:
    return tuple(
        ModalitySpec(
            name=m["name"],
            kind=m["kind"],
            input_shape=tuple(m["input_shape"]),
            is_anchor=bool(m.get("is_anchor", False)),
        )
        for m in manifest["modalities"]
    )
