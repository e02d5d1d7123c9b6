"""Metrics and the missing-modality scenario harness.

Balanced accuracy is the mean of per-class recalls; F1 is support-weighted
over classes present in the labels; TPR/TNR are the class-1 and class-0
recalls of a binary task. Values are fractions in [0, 1] internally and
percent with one decimal in serialized reports. A class absent from the
labels is excluded from the average and flagged, never silently counted.

Scenario runs compare each modality-drop configuration against the
unmodified baseline, reporting per-metric deltas.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Observation, drop_modalities
from .errors import ConfigError


@dataclass(frozen=True)
class MetricsResult:
    values: dict[str, float]  # fractions in [0, 1]
    missing_classes: tuple[int, ...] = ()

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def as_percent(self) -> dict[str, float]:
        return {k: round(v * 100.0, 1) for k, v in self.values.items()}


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=int)
    for y, p in zip(labels, predictions):
        cm[y, p] += 1
    return cm


def metrics(predictions, labels, n_classes: int | None = None) -> MetricsResult:
    """Balanced accuracy, weighted F1, and (binary only) TPR/TNR."""
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ConfigError(
            f"predictions and labels must be equal-length vectors, got {predictions.shape} vs {labels.shape}"
        )
    if len(labels) == 0:
        raise ConfigError("cannot compute metrics on an empty set")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    cm = confusion_matrix(predictions, labels, n_classes)
    support = cm.sum(axis=1)
    present = np.flatnonzero(support > 0)
    missing = tuple(int(c) for c in np.flatnonzero(support == 0))

    recall = np.zeros(n_classes)
    precision = np.zeros(n_classes)
    f1 = np.zeros(n_classes)
    predicted = cm.sum(axis=0)
    for c in present:
        tp = cm[c, c]
        recall[c] = tp / support[c]
        precision[c] = tp / predicted[c] if predicted[c] > 0 else 0.0
        denom = precision[c] + recall[c]
        f1[c] = 2.0 * precision[c] * recall[c] / denom if denom > 0 else 0.0

    values = {
        "acc": float(recall[present].mean()),
        "f1": float((f1[present] * support[present]).sum() / support[present].sum()),
    }
    if n_classes == 2:
        # recall of an absent class is undefined: omit the key, flag the class
        if 1 in present:
            values["tpr"] = float(recall[1])
        if 0 in present:
            values["tnr"] = float(recall[0])
    return MetricsResult(values=values, missing_classes=missing)


@dataclass
class ScenarioReport:
    name: str
    dropped: list[str]
    metrics: dict[str, float]  # fractions
    delta: dict[str, float]  # fraction difference vs baseline
    missing_classes: tuple[int, ...] = ()


@dataclass
class FoldResult:
    baseline: MetricsResult
    scenarios: list[ScenarioReport] = field(default_factory=list)


def run_scenarios(
    predict_fn,
    test_set: list[Observation],
    scenarios: list[tuple[str, list[str]]],
    n_classes: int = 2,
) -> FoldResult:
    """Evaluate ``predict_fn`` on the baseline set and on each drop scenario."""
    labels = np.array([o.label for o in test_set], dtype=int)
    baseline = metrics(predict_fn(test_set), labels, n_classes)
    reports = []
    for name, drops in scenarios:
        modified = drop_modalities(test_set, drops)
        m = metrics(predict_fn(modified), labels, n_classes)
        delta = {k: m.values[k] - baseline.values[k] for k in m.values}
        reports.append(
            ScenarioReport(
                name=name,
                dropped=list(drops),
                metrics=m.values,
                delta=delta,
                missing_classes=m.missing_classes,
            )
        )
    return FoldResult(baseline=baseline, scenarios=reports)


def _pct(x: float) -> float:
    return round(x * 100.0, 1)


def aggregate_folds(folds: list[FoldResult]) -> dict:
    """Mean/std (in percent) per metric over folds, for baseline and scenarios."""
    if not folds:
        raise ConfigError("no fold results to aggregate")
    first = folds[0]
    out = {
        "baseline": {},
        "scenarios": [],
    }
    for key in first.baseline.values:
        vals = [f.baseline.values[key] for f in folds]
        out["baseline"][key] = {"mean": _pct(float(np.mean(vals))), "std": _pct(float(np.std(vals)))}
    for si, sc in enumerate(first.scenarios):
        entry = {"name": sc.name, "dropped": sc.dropped, "metrics": {}, "delta": {}}
        for key in sc.metrics:
            vals = [f.scenarios[si].metrics[key] for f in folds]
            deltas = [f.scenarios[si].delta[key] for f in folds]
            entry["metrics"][key] = {"mean": _pct(float(np.mean(vals))), "std": _pct(float(np.std(vals)))}
            entry["delta"][key] = {"mean": _pct(float(np.mean(deltas))), "std": _pct(float(np.std(deltas)))}
        out["scenarios"].append(entry)
    return out


def write_report(folds: list[FoldResult], out_dir: str, config_digest: str = "") -> dict:
    """Emit report.json and report.csv (values in percent, mean(std) across folds)."""
    os.makedirs(out_dir, exist_ok=True)
    agg = aggregate_folds(folds)
    single = len(folds) == 1

    def scalar(entry: dict) -> float:
        return entry["mean"]

    report = {
        "baseline": {k: scalar(v) for k, v in agg["baseline"].items()},
        "scenarios": [
            {
                "name": s["name"],
                "dropped": s["dropped"],
                "metrics": {k: scalar(v) for k, v in s["metrics"].items()},
                "delta": {k: scalar(v) for k, v in s["delta"].items()},
            }
            for s in agg["scenarios"]
        ],
        "folds": len(folds),
        "config_digest": config_digest,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")

    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "metric", "mean", "std", "delta_mean"])
        for key, entry in agg["baseline"].items():
            writer.writerow(["baseline", key, entry["mean"], "" if single else entry["std"], ""])
        for s in agg["scenarios"]:
            for key, entry in s["metrics"].items():
                writer.writerow(
                    [
                        s["name"],
                        key,
                        entry["mean"],
                        "" if single else entry["std"],
                        s["delta"][key]["mean"],
                    ]
                )
    return report
