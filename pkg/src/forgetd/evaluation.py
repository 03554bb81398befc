"""Accuracy metrics and the JSON/CSV report.

"Membership inference metric" here means what the unlearning literature this
package follows uses it for: plain accuracy measured separately on the
targeted and the retained data. It is not a shadow-model attack.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from forgetd.data import Dataset, SplitPair
from forgetd.errors import InputError
from forgetd.ledger import Ledger, ledger_size_bytes
from forgetd.nn import ModelParams, predict

TRAJECTORY_HEADER = ("epoch", "targeted_acc", "retained_acc")
SWEEP_HEADER = ("fraction", "achieved_fraction", "method", "n_targets", "targeted_acc", "retained_acc")
REPORT_KEYS = ("config", "before", "after", "per_class", "trajectory", "storage", "sweep")


def frac(x) -> float:
    """Fractions are carried with 6 decimal digits throughout reports."""
    return round(float(x), 6)


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    """Share of samples whose argmax logit equals the label (ties -> lower class)."""
    if len(dataset) == 0:
        raise InputError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(params, dataset.images) == dataset.labels))


def per_class_accuracy(params: ModelParams, dataset: Dataset) -> dict[int, float]:
    if len(dataset) == 0:
        return {}
    hits = predict(params, dataset.images) == dataset.labels
    return {int(c): float(np.mean(hits[dataset.labels == c])) for c in np.unique(dataset.labels)}


def split_accuracy(params: ModelParams, split: SplitPair) -> dict[str, float]:
    out = {"targeted_acc": frac(accuracy(params, split.targeted))}
    out["retained_acc"] = frac(accuracy(params, split.retained)) if len(split.retained) else None
    return out


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(eq=False)
class MetricsReport:
    config: dict = field(default_factory=dict)
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    storage: dict = field(default_factory=dict)
    sweep: list = field(default_factory=list)

    @property
    def targeted_acc(self):
        return self.after.get("targeted_acc")

    @property
    def retained_acc(self):
        return self.after.get("retained_acc")

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "before": self.before,
            "after": self.after,
            "per_class": {k: {str(c): a for c, a in v.items()} for k, v in self.per_class.items()},
            "trajectory": [list(row) for row in self.trajectory],
            "storage": self.storage,
            "sweep": self.sweep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        missing = [k for k in REPORT_KEYS if k not in d]
        if missing:
            raise InputError(f"report is missing keys {missing}")
        return cls(
            config=d["config"],
            before=d["before"],
            after=d["after"],
            per_class={k: {int(c): a for c, a in v.items()} for k, v in d["per_class"].items()},
            trajectory=[tuple(row) for row in d["trajectory"]],
            storage=d["storage"],
            sweep=d["sweep"],
        )

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def membership_inference_report(
    w_before: ModelParams,
    w_after: ModelParams,
    split: SplitPair,
    trajectory: Sequence = (),
    ledgers: Sequence[Ledger] = (),
    config: dict | None = None,
    test_split: SplitPair | None = None,
) -> MetricsReport:
    """Targeted/retained accuracy before and after unlearning, plus storage."""
    config = dict(config or {})
    config.setdefault("fingerprint", config_fingerprint(config))
    rep = MetricsReport(config=config)
    for key, w in (("before", w_before), ("after", w_after)):
        vals = split_accuracy(w, split)
        if test_split is not None:
            t = split_accuracy(w, test_split)
            vals["test_targeted_acc"] = t["targeted_acc"]
            vals["test_retained_acc"] = t["retained_acc"]
        setattr(rep, key, vals)
        everything = Dataset(
            np.concatenate([split.targeted.images, split.retained.images]),
            np.concatenate([split.targeted.labels, split.retained.labels]),
            np.concatenate([split.targeted.sample_ids, split.retained.sample_ids]),
            split.targeted.n_classes,
        )
        rep.per_class[key] = {c: frac(a) for c, a in per_class_accuracy(w, everything).items()}
    rep.trajectory = [(int(e), frac(t), None if r is None else frac(r)) for e, t, r in trajectory]
    for led in ledgers:
        name = "ledger_bytes_full" if led.mode == "full" else "ledger_bytes_pruned"
        rep.storage[name] = ledger_size_bytes(led)
    return rep


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def trajectory_csv(trajectory) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRAJECTORY_HEADER)
    for e, t, r in trajectory:
        wr.writerow([int(e), _fmt(float(t)), _fmt(None if r is None else float(r))])
    return buf.getvalue()


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SWEEP_HEADER)
    for row in rows:
        wr.writerow([_fmt(row[k]) for k in SWEEP_HEADER])
    return buf.getvalue()


def emit_report(report: MetricsReport, path, fmt: str = "json") -> None:
    """Write ``report`` as JSON (full schema) or CSV (the trajectory table)."""
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2) + "\n"
    elif fmt == "csv":
        text = trajectory_csv(report.trajectory)
    else:
        raise InputError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def read_report(path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))


def read_trajectory_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRAJECTORY_HEADER:
        raise InputError(f"{path}: not a trajectory CSV")
    return [(int(e), float(t), float(r) if r else None) for e, t, r in rows[1:]]
