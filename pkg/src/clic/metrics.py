"""Classification metrics, cross-seed aggregation and result tables."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import Superclass
from .errors import EmptyInput, LengthMismatch

logger = logging.getLogger(__name__)

CLASSES = [c.name for c in Superclass]
N_CLASSES = len(CLASSES)


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if preds.size == 0:
        raise EmptyInput("no predictions")
    if preds.min() < 0 or labels.min() < 0 or max(preds.max(), labels.max()) >= n_classes:
        raise ValueError("class index out of range")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0:
        logger.warning("%s undefined (0/0), set to 0", what)
        return 0.0
    return num / den


@dataclass(frozen=True)
class MetricsReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    macro_f1: float
    accuracy: float

    def values(self) -> dict[str, float]:
        """Flat metric map, e.g. ``{"NORM/f1": ..., "macro_f1": ..., "accuracy": ...}``."""
        out = {}
        for i, name in enumerate(CLASSES[: len(self.f1)]):
            out[f"{name}/f1"] = self.f1[i]
            out[f"{name}/recall"] = self.recall[i]
            out[f"{name}/precision"] = self.precision[i]
        out["macro_f1"] = self.macro_f1
        out["accuracy"] = self.accuracy
        return out

    def to_json(self, mode: str | None = None, seed: int | None = None) -> dict:
        d = {"mode": mode}
        if seed is not None:
            d["seed"] = seed
        d["per_class"] = {
            name: {"f1": self.f1[i], "recall": self.recall[i], "precision": self.precision[i],
                   "support": self.support[i]}
            for i, name in enumerate(CLASSES[: len(self.f1)])
        }
        d["macro_f1"] = self.macro_f1
        d["accuracy"] = self.accuracy
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "MetricsReport":
        names = [n for n in CLASSES if n in d["per_class"]]
        pc = d["per_class"]
        return cls(
            tuple(pc[n]["precision"] for n in names),
            tuple(pc[n]["recall"] for n in names),
            tuple(pc[n]["f1"] for n in names),
            tuple(int(pc[n]["support"]) for n in names),
            d["macro_f1"],
            d["accuracy"],
        )


def summarize(cm: ConfusionMatrix) -> MetricsReport:
    c = cm.counts
    if cm.n == 0:
        raise EmptyInput("empty confusion matrix")
    precision, recall, f1 = [], [], []
    for k in range(c.shape[0]):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        p = _ratio(tp, tp + fp, f"precision of class {k}")
        r = _ratio(tp, tp + fn, f"recall of class {k}")
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * p * r, p + r, f"F1 of class {k}"))
    return MetricsReport(
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        support=tuple(int(s) for s in c.sum(axis=1)),
        macro_f1=float(np.mean(f1)),
        accuracy=float(np.trace(c)) / cm.n,
    )


def evaluate_predictions(preds, labels) -> MetricsReport:
    return summarize(confusion_matrix(preds, labels))


@dataclass(frozen=True)
class MetricStat:
    mean: float
    std: float
    n_runs: int

    def cell(self) -> str:
        return f"{self.mean:.3f}±{self.std:.3f}"


@dataclass(frozen=True)
class AggregateReport:
    """Per-metric mean and population standard deviation across runs."""

    stats: dict[str, MetricStat]
    std_estimator: str = "population"

    def __getitem__(self, key: str) -> MetricStat:
        return self.stats[key]

    def to_json(self) -> dict:
        return {
            "std_estimator": self.std_estimator,
            "metrics": {k: {"mean": s.mean, "std": s.std, "n_runs": s.n_runs} for k, s in self.stats.items()},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "AggregateReport":
        stats = {k: MetricStat(v["mean"], v["std"], v["n_runs"]) for k, v in d["metrics"].items()}
        return cls(stats, d.get("std_estimator", "population"))


def aggregate_runs(reports: Iterable[MetricsReport]) -> AggregateReport:
    reports = list(reports)
    if not reports:
        raise EmptyInput("no runs to aggregate")
    n = len(reports)
    stats = {}
    for key in reports[0].values():
        vals = [r.values()[key] for r in reports]
        # fsum is exactly rounded, hence independent of run order
        mean = math.fsum(vals) / n
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / n)
        stats[key] = MetricStat(mean, std, n)
    return AggregateReport(stats)


# --------------------------------------------------------------------------
# Tables
# --------------------------------------------------------------------------

TABLE_COLUMNS = [
    (f"{c}/{key}", f"{c} {title}") for c in CLASSES for key, title in (("f1", "F1"), ("recall", "Recall"))
] + [("macro_f1", "Macro-F1"), ("accuracy", "Accuracy")]


def _ranks(values: list[float]) -> list[int]:
    # 0 = best, 1 = second best; ties resolved by row order
    order = sorted(range(len(values)), key=lambda i: -values[i])
    rank = [len(values)] * len(values)
    for r, i in enumerate(order):
        rank[i] = r
    return rank


def render_table(aggs: Mapping[str, AggregateReport], fmt: str = "markdown") -> str:
    if not aggs:
        raise EmptyInput("no modes to render")
    modes = list(aggs)
    if fmt == "json":
        return json.dumps({m: aggs[m].to_json() for m in modes}, indent=2, sort_keys=True) + "\n"

    cells = {m: [aggs[m][key].cell() for key, _ in TABLE_COLUMNS] for m in modes}
    headers = ["Model"] + [title for _, title in TABLE_COLUMNS]

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(headers)
        for m in modes:
            w.writerow([m] + cells[m])
        return buf.getvalue()

    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    for j, (key, _) in enumerate(TABLE_COLUMNS):
        ranks = _ranks([aggs[m][key].mean for m in modes])
        for m, r in zip(modes, ranks):
            if r == 0:
                cells[m][j] = f"**{cells[m][j]}**"
            elif r == 1:
                cells[m][j] = f"<u>{cells[m][j]}</u>"
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    lines += ["| " + " | ".join([m] + cells[m]) + " |" for m in modes]
    return "\n".join(lines) + "\n"


def write_embedding_csv(path, ids: Sequence[str], labels: Sequence[int], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"e{i}" for i in range(vectors.shape[1])])
        for rid, lab, vec in zip(ids, labels, vectors):
            w.writerow([rid, Superclass(int(lab)).name] + [repr(float(v)) for v in vec])


def export_embeddings(checkpoint, data, path, batch_size: int = 16) -> np.ndarray:
    """Write the penultimate (64-wide) representation of every record in ``data``.

    ``checkpoint`` is a checkpoint path or a loaded model; ``data`` is an
    ``ArraySet`` whose rows are written in stored order. Returns the matrix.
    """
    import torch

    if isinstance(checkpoint, torch.nn.Module):
        model = checkpoint
    else:
        from .training import load_checkpoint

        model, _ = load_checkpoint(checkpoint)
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        parts = [model.penultimate(b.x, b.context) for b in data.batches(batch_size, dtype=dtype)]
    vectors = torch.cat(parts).numpy() if parts else np.zeros((0, model.cfg.head_dims[-2]))
    write_embedding_csv(path, data.ids, data.y, vectors)
    return vectors
