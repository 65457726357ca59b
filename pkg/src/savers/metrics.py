"""Confusion matrix, per-class precision/recall/F1, cell accuracy maps and
background-probability distributions, plus their CSV/PGM renderings."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError

UNDEFINED = "undefined"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[predicted, actual]
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


def accumulate(predictions: Sequence[int], truths: Sequence[int], class_names: Sequence[str],
               cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    """Tally ``(predicted, actual)`` pairs, optionally on top of an existing matrix."""
    pred, true = np.asarray(predictions, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise DimensionError(f"predictions {pred.shape} and truths {true.shape} must be aligned 1-D")
    nc = len(class_names)
    for name, arr in (("prediction", pred), ("truth", true)):
        bad = (arr < 0) | (arr >= nc)
        if bad.any():
            i = int(np.argmax(bad))
            raise DataError(f"{name} {arr[i]} at index {i} outside 0..{nc - 1}")
    counts = np.zeros((nc, nc), dtype=np.int64) if cm is None else cm.counts.copy()
    np.add.at(counts, (pred, true), 1)
    return ConfusionMatrix(counts, list(class_names))


@dataclass
class ClassMetrics:
    class_id: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float | None  # None = undefined (0/0)
    recall: float | None
    f1: float | None


def class_metrics(cm: ConfusionMatrix, class_id: int) -> ClassMetrics:
    """One-vs-rest counts and scores for ``class_id``."""
    c = cm.counts
    tp = int(c[class_id, class_id])
    fp = int(c[class_id, :].sum()) - tp
    fn = int(c[:, class_id].sum()) - tp
    tn = cm.total - tp - fp - fn
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassMetrics(class_id, tp, fp, fn, tn, precision, recall, f1)


def all_class_metrics(cm: ConfusionMatrix) -> list[ClassMetrics]:
    return [class_metrics(cm, k) for k in range(cm.num_classes)]


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ConfigError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


def cell_accuracy_map(cell_predictions: Sequence[np.ndarray], truths: Sequence[int]) -> np.ndarray:
    """Fraction of chips whose per-cell argmax equals the chip's class, per cell."""
    if len(cell_predictions) != len(truths) or not len(truths):
        raise DimensionError("need equally many (non-zero) cell maps and truths")
    shapes = {np.shape(p) for p in cell_predictions}
    if len(shapes) != 1:
        raise DimensionError(f"cell maps have mixed shapes {sorted(shapes)}")
    preds = np.stack(cell_predictions)
    hits = preds == np.asarray(truths)[:, None, None]
    return hits.mean(axis=0)


@dataclass
class ScoreDistribution:
    target_values: np.ndarray
    clutter_values: np.ndarray
    bin_edges: np.ndarray
    target_hist: np.ndarray
    clutter_hist: np.ndarray

    def cdf(self, threshold) -> np.ndarray | float:
        """Empirical P(1 - p0 <= t) over the target chips."""
        v = np.sort(self.target_values)
        if not v.size:
            raise ConfigError("no target chips in distribution")
        out = np.searchsorted(v, np.asarray(threshold, dtype=np.float64), side="right") / v.size
        return float(out) if np.ndim(out) == 0 else out


def score_distribution(background_probs: Sequence[float], truths: Sequence[int],
                       bins: int = 50) -> ScoreDistribution:
    """Histogram of ``1 - p0`` for target and clutter chips on [0, 1]."""
    p0 = np.asarray(background_probs, dtype=np.float64)
    t = np.asarray(truths)
    if p0.shape != t.shape:
        raise DimensionError("background probabilities and truths must align")
    values = np.clip(1.0 - p0, 0.0, 1.0)
    edges = np.linspace(0.0, 1.0, bins + 1)
    tv, cv = values[t != 0], values[t == 0]
    return ScoreDistribution(tv, cv, edges, np.histogram(tv, edges)[0], np.histogram(cv, edges)[0])


# --- rendering ---------------------------------------------------------------

def _fmt(x) -> str:
    return UNDEFINED if x is None else repr(float(x))


def _parse(s: str):
    return None if s == UNDEFINED else float(s)


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    """Rows = predicted, columns = actual, with precision column and recall/F1 rows."""
    ms = all_class_metrics(cm)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["predicted\\actual", *cm.class_names, "precision"])
        for k, name in enumerate(cm.class_names):
            w.writerow([name, *cm.counts[k].tolist(), _fmt(ms[k].precision)])
        w.writerow(["recall", *[_fmt(m.recall) for m in ms], ""])
        w.writerow(["f1", *[_fmt(m.f1) for m in ms], ""])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    names = rows[0][1:-1]
    counts = np.array([[int(v) for v in r[1:-1]] for r in rows[1:1 + len(names)]], dtype=np.int64)
    return ConfusionMatrix(counts, names)


METRIC_FIELDS = ["class", "tp", "fp", "fn", "tn", "precision", "recall", "f1"]


def write_metrics_csv(cm: ConfusionMatrix, metrics: Sequence[ClassMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([cm.class_names[m.class_id], m.tp, m.fp, m.fn, m.tn,
                        _fmt(m.precision), _fmt(m.recall), _fmt(m.f1)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{"class": r["class"], **{k: int(r[k]) for k in ("tp", "fp", "fn", "tn")},
             **{k: _parse(r[k]) for k in ("precision", "recall", "f1")}} for r in rows]


def write_distribution_csv(dist: ScoreDistribution, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "target_count", "clutter_count", "target_cdf"])
        for i in range(len(dist.bin_edges) - 1):
            lo, hi = dist.bin_edges[i], dist.bin_edges[i + 1]
            cdf = dist.cdf(hi) if dist.target_values.size else None
            w.writerow([repr(float(lo)), repr(float(hi)), int(dist.target_hist[i]),
                        int(dist.clutter_hist[i]), _fmt(cdf)])


def read_distribution_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{"bin_low": float(r["bin_low"]), "bin_high": float(r["bin_high"]),
                 "target_count": int(r["target_count"]), "clutter_count": int(r["clutter_count"]),
                 "target_cdf": _parse(r["target_cdf"])} for r in csv.DictReader(f)]


def write_cell_map_pgm(acc_map: np.ndarray, path) -> None:
    from .datapipe import write_image_pgm
    write_image_pgm(path, acc_map)


def write_cell_map_csv(acc_map: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in acc_map:
            w.writerow([repr(float(v)) for v in row])


def render_reports(cm: ConfusionMatrix, metrics: Sequence[ClassMetrics],
                   distribution: ScoreDistribution, out_dir,
                   cell_map: np.ndarray | None = None) -> dict[str, Path]:
    """Write the table CSVs, distribution CSV and cell-accuracy heat image."""
    if cm.total == 0:
        raise ConfigError("empty evaluation set, nothing to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from None
    paths = {"confusion": out / "confusion_matrix.csv", "metrics": out / "class_metrics.csv",
             "distribution": out / "score_distribution.csv"}
    write_confusion_csv(cm, paths["confusion"])
    write_metrics_csv(cm, metrics, paths["metrics"])
    write_distribution_csv(distribution, paths["distribution"])
    if cell_map is not None:
        paths["cell_map"] = out / "cell_accuracy.pgm"
        paths["cell_map_csv"] = out / "cell_accuracy.csv"
        write_cell_map_pgm(cell_map, paths["cell_map"])
        write_cell_map_csv(cell_map, paths["cell_map_csv"])
    return paths

