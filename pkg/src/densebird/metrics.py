"""ROC-AUC, confusion rates, bootstrap intervals and score histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class PredictionSet:
    item_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.item_ids = [str(i) for i in self.item_ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.item_ids),):
            raise ValueError("one score per item is required")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("item ids must be unique")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.scores.shape:
                raise ValueError("one label per item is required")
            if np.any((self.labels != 0) & (self.labels != 1)):
                raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.item_ids)

    @classmethod
    def from_arrays(cls, scores, labels=None):
        return cls([str(i) for i in range(len(scores))], scores, labels)

    def subset(self, index) -> "PredictionSet":
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return PredictionSet([self.item_ids[i] for i in index], self.scores[index], labels)

    def with_labels(self, labels_by_id: dict[str, int]) -> "PredictionSet":
        missing = [i for i in self.item_ids if i not in labels_by_id]
        if missing:
            raise KeyError(f"no label for {len(missing)} items, e.g. {missing[0]!r}")
        return PredictionSet(self.item_ids, self.scores, [labels_by_id[i] for i in self.item_ids])


def _require_labels(preds: PredictionSet) -> np.ndarray:
    if preds.labels is None:
        raise ValueError("labels are required")
    return preds.labels


def _class_counts(labels):
    n_pos = int(labels.sum())
    return n_pos, len(labels) - n_pos


def roc_curve(preds: PredictionSet):
    """ROC points (fpr, tpr, thresholds), one per distinct score, from (0, 0) to (1, 1)."""
    labels = _require_labels(preds)
    n_pos, n_neg = _class_counts(labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    tp, fp, thresholds = _cumulative_counts(preds.scores, labels)
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    return fpr, tpr, np.concatenate([[np.inf], thresholds])


def _cumulative_counts(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1 - y)[last_of_group]
    return tp, fp, s[last_of_group]


def roc_auc(preds: PredictionSet) -> float:
    """Trapezoidal area under the ROC curve.

    Counts stay integral until the final division, so tied scores
    contribute exactly one half per positive/negative pair.
    """
    return _auc(preds.scores, _require_labels(preds))


def _auc(scores, labels) -> float:
    n_pos, n_neg = _class_counts(labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    tp, fp, _ = _cumulative_counts(scores, labels)
    tp = np.concatenate([[0], tp])
    fp = np.concatenate([[0], fp])
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2.0 * n_pos * n_neg)


def roc_auc_pairwise(scores, labels) -> float:
    """Mann-Whitney form of the AUC by explicit pair enumeration."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def confusion_metrics(preds: PredictionSet, threshold: float = 0.5):
    """(accuracy, true negative rate, true positive rate); score >= threshold is positive.

    A rate whose class is absent is NaN.
    """
    return _confusion(preds.scores, _require_labels(preds), threshold)


def _confusion(scores, labels, threshold=0.5):
    decisions = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(decisions & pos))
    tn = int(np.sum(~decisions & ~pos))
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    acc = (tp + tn) / len(labels) if len(labels) else float("nan")
    tpr = tp / n_pos if n_pos else float("nan")
    tnr = tn / n_neg if n_neg else float("nan")
    return acc, tnr, tpr


METRICS = {
    "auc": _auc,
    "acc": lambda s, y: _confusion(s, y)[0],
    "tnr": lambda s, y: _confusion(s, y)[1],
    "tpr": lambda s, y: _confusion(s, y)[2],
}


def bootstrap_ci(metric: str, preds: PredictionSet, n_resamples: int = 100,
                 resample_size: int = 1000, seed: int = 1234, level: float = 0.95,
                 max_redraws: int = 10):
    """Percentile bootstrap interval for `metric` over rows drawn with replacement.

    Resamples that miss a class are redrawn up to `max_redraws` times; fewer
    than half usable resamples is an error.
    """
    labels = _require_labels(preds)
    fn = METRICS[metric]
    rng = np.random.default_rng(seed)
    n = len(labels)
    values = []
    for _ in range(n_resamples):
        for _attempt in range(max_redraws):
            idx = rng.integers(0, n, size=resample_size)
            y = labels[idx]
            if 0 < y.sum() < len(y):
                values.append(fn(preds.scores[idx], y))
                break
    if len(values) < n_resamples / 2:
        raise ValueError(f"only {len(values)} of {n_resamples} bootstrap resamples contained both classes")
    alpha = (1 - level) / 2 * 100
    lower, upper = np.percentile(values, [alpha, 100 - alpha])
    return float(lower), float(upper)


def probability_histogram(preds: PredictionSet, n_bins: int = 10) -> np.ndarray:
    """Equal-width histogram over [0, 1] normalized to unit total mass."""
    counts, _ = np.histogram(np.clip(preds.scores, 0.0, 1.0), bins=n_bins, range=(0.0, 1.0))
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


@dataclass
class MetricReport:
    values: dict[str, float] = field(default_factory=dict)
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for name, v in self.values.items():
            # shortest round-trip repr, so values can be compared exactly downstream
            lines.append(f"{name}={float(v)!r}")
            if name in self.intervals:
                lo, hi = self.intervals[name]
                lines.append(f"{name}_ci_low={float(lo)!r}")
                lines.append(f"{name}_ci_high={float(hi)!r}")
        return "\n".join(lines) + "\n"


def metric_report(preds: PredictionSet, n_resamples: int = 100, resample_size: int = 1000,
                  seed: int = 1234, threshold: float = 0.5) -> MetricReport:
    acc, tnr, tpr = confusion_metrics(preds, threshold)
    report = MetricReport({"auc": roc_auc(preds), "acc": acc, "tnr": tnr, "tpr": tpr})
    if n_resamples > 0:
        for name in report.values:
            report.intervals[name] = bootstrap_ci(name, preds, n_resamples, resample_size, seed)
    return report


# ---------------------------------------------------------------------------
# CSV formats


def read_predictions(path) -> PredictionSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"itemid", "probability"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header 'itemid,probability'")
        ids, scores = [], []
        for row in reader:
            ids.append(row["itemid"])
            scores.append(float(row["probability"]))
    return PredictionSet(ids, np.array(scores))


def write_predictions(path, preds: PredictionSet, decisions: bool = False, threshold: float = 0.5) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["itemid", "probability"] + (["decision"] if decisions else []))
        for item, s in zip(preds.item_ids, preds.scores):
            row = [item, repr(float(s))]
            if decisions:
                row.append(int(s >= threshold))
            writer.writerow(row)


def write_roc_points(path, preds: PredictionSet) -> None:
    fpr, tpr, thr = roc_curve(preds)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for row in zip(fpr, tpr, thr):
            writer.writerow([f"{v:.10g}" for v in row])
