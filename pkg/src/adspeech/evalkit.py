"""Segment-to-sample aggregation, classification metrics and reporting."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import GROUPS

N_CLASSES = len(GROUPS)


class EvalError(Exception):
    pass


@dataclass
class PredictionSet:
    """Per-segment class probabilities plus per-sample ground truth."""
    segments: list[tuple[str, np.ndarray]]  # (sample_id, probs over GROUPS)
    truth: dict[str, str]  # sample_id -> class label

    def __post_init__(self):
        for sid, p in self.segments:
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (N_CLASSES,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
                raise EvalError(f"segment {sid}: probabilities must be a {N_CLASSES}-simplex point")
            if sid not in self.truth:
                raise EvalError(f"segment {sid} has no ground-truth label")


@dataclass
class EvalReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # rows = truth, cols = predicted, GROUPS order
    split_tag: str = ""
    per_class: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    def to_json(self) -> str:
        return json.dumps({
            "split_tag": self.split_tag,
            **self.metrics(),
            "per_class": self.per_class,
            "confusion": self.confusion.astype(int).tolist(),
            "classes": list(GROUPS),
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            accuracy=d["accuracy"], macro_precision=d["macro_precision"],
            macro_recall=d["macro_recall"], macro_f1=d["macro_f1"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            split_tag=d.get("split_tag", ""), per_class=d.get("per_class", {}),
        )


def aggregate(predictions: PredictionSet, mode: str = "vote") -> dict[str, str]:
    """Collapse segment predictions to one label per sample.

    vote: majority over segment argmaxes, ties broken by summed probability
    and then by class order. mean_prob: argmax of the averaged probabilities.
    """
    if mode not in ("vote", "mean_prob"):
        raise EvalError(f"unknown aggregation mode {mode!r}")
    by_sample: dict[str, list[np.ndarray]] = defaultdict(list)
    for sid, p in predictions.segments:
        by_sample[sid].append(np.asarray(p, dtype=np.float64))
    out = {}
    for sid, probs in by_sample.items():
        stack = np.stack(probs)
        if mode == "mean_prob":
            out[sid] = GROUPS[int(stack.mean(axis=0).argmax())]
        else:
            votes = np.bincount(stack.argmax(axis=1), minlength=N_CLASSES)
            best = votes.max()
            tied = np.flatnonzero(votes == best)
            if tied.size == 1:
                out[sid] = GROUPS[int(tied[0])]
            else:
                sums = stack.sum(axis=0)[tied]
                # tolerance absorbs summation-order noise so the final
                # lowest-class-index rule stays deterministic
                near_best = sums >= sums.max() - 1e-9 * max(1.0, abs(sums.max()))
                out[sid] = GROUPS[int(tied[near_best].min())]
    return out


def compute_metrics(labels_true: list[str], labels_pred: list[str],
                    split_tag: str = "") -> EvalReport:
    """Accuracy, macro P/R/F1 (0/0 := 0) and the confusion matrix."""
    if len(labels_true) != len(labels_pred) or not labels_true:
        raise EvalError("need equal-length, non-empty label vectors")
    idx = {g: i for i, g in enumerate(GROUPS)}
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(labels_true, labels_pred):
        cm[idx[t], idx[p]] += 1
    total = cm.sum()
    accuracy = cm.trace() / total
    per_class = {}
    precisions, recalls, f1s = [], [], []
    for i, g in enumerate(GROUPS):
        tp = cm[i, i]
        fp = cm[:, i].sum() - tp
        fn = cm[i, :].sum() - tp
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class[g] = {"precision": p, "recall": r, "f1": f1}
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
    return EvalReport(
        accuracy=float(accuracy),
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
        confusion=cm,
        split_tag=split_tag,
        per_class=per_class,
    )


def evaluate_predictions(predictions: PredictionSet, mode: str = "vote",
                         split_tag: str = "") -> EvalReport:
    agg = aggregate(predictions, mode)
    ids = sorted(agg)
    return compute_metrics([predictions.truth[s] for s in ids],
                           [agg[s] for s in ids], split_tag)


def cross_split_report(reports: list[EvalReport]) -> dict:
    """Population mean and std per metric across split versions."""
    if len(reports) < 2:
        raise EvalError("cross-split aggregation needs at least 2 reports")
    out = {}
    for name in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
        values = np.array([r.metrics()[name] for r in reports])
        mean = float(values.mean())
        std = float(values.std())  # population std: the splits are the population
        out[name] = {
            "mean": mean,
            "std": std,
            "display": format_mean_std(mean, std),
        }
    out["split_tags"] = [r.split_tag for r in reports]
    return out


def format_mean_std(mean: float, std: float) -> str:
    """Percent with one decimal, e.g. 88.0±0.8."""
    return f"{100 * mean:.1f}±{100 * std:.1f}"


def render_table(rows: dict[str, dict], out_md: str | Path, out_csv: str | Path) -> None:
    """rows: model name -> cross_split_report output."""
    metrics = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
    headers = ["model", *metrics]
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(headers)
        for model, rep in rows.items():
            w.writerow([model] + [rep[m]["display"] for m in metrics])
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "---|" * len(headers)]
    for model, rep in rows.items():
        lines.append("| " + " | ".join([model] + [rep[m]["display"] for m in metrics]) + " |")
    lines.append("")
    lines.append("std is the population standard deviation across split versions.")
    Path(out_md).write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_confusion(report: EvalReport, out_png: str | Path, out_csv: str | Path,
                     title: str = "") -> None:
    """Labeled heatmap PNG plus the exact integer matrix as CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = report.confusion
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["truth\\pred", *GROUPS])
        for g, row in zip(GROUPS, cm):
            w.writerow([g, *row.tolist()])

    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(N_CLASSES), GROUPS)
    ax.set_yticks(range(N_CLASSES), GROUPS)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    if title:
        ax.set_title(title)
    thresh = cm.max() / 2 if cm.max() else 0.5
    for i in range(N_CLASSES):
        for j in range(N_CLASSES):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    color="white" if cm[i, j] > thresh else "black")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def read_confusion_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return np.asarray([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
