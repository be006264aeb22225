"""Accuracy, macro-F1, per-slice accuracy, and sentiment-representation export."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .finetune import POLARITIES, AspectExample, AspectModel
from .text import Vocab


class EmptyDatasetError(ValueError):
    pass


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: dict[str, dict]
    ese_accuracy: float | None
    ise_accuracy: float | None
    counts: dict[str, int]
    confusion: list[list[int]]
    macro_f1_classes: list[str] = field(default_factory=list)
    macro_f1_note: str = "classes absent from gold are excluded from the macro-F1 mean"

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(gold: Sequence[str], pred: Sequence[str], classes=POLARITIES) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for g, p in zip(gold, pred):
        m[idx[g], idx[p]] += 1
    return m


def compute_metrics(gold: Sequence[str], pred: Sequence[str], tags: Sequence[str] | None = None,
                    classes=POLARITIES) -> MetricsReport:
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold labels vs {len(pred)} predictions")
    if not gold:
        raise EmptyDatasetError("cannot evaluate an empty dataset")
    cm = confusion_matrix(gold, pred, classes)
    total = int(cm.sum())
    correct = int(np.trace(cm))
    per_class = {}
    f1s = []
    in_gold = []
    for i, c in enumerate(classes):
        tp = int(cm[i, i])
        pred_n = int(cm[:, i].sum())
        gold_n = int(cm[i, :].sum())
        precision = tp / pred_n if pred_n else 0.0
        recall = tp / gold_n if gold_n else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1, "support": gold_n, "predicted": pred_n}
        if gold_n:
            f1s.append(f1)
            in_gold.append(c)

    slice_acc = {"ESE": None, "ISE": None}
    counts = {"total": total, "correct": correct}
    if tags is not None:
        if len(tags) != len(gold):
            raise ValueError("one slice tag per example is required")
        for tag in ("ESE", "ISE"):
            hits = [g == p for g, p, t in zip(gold, pred, tags) if t == tag]
            counts[tag] = len(hits)
            slice_acc[tag] = sum(hits) / len(hits) if hits else None

    return MetricsReport(
        accuracy=correct / total,
        macro_f1=float(sum(f1s) / len(f1s)),
        per_class=per_class,
        ese_accuracy=slice_acc["ESE"],
        ise_accuracy=slice_acc["ISE"],
        counts=counts,
        confusion=cm.tolist(),
        macro_f1_classes=in_gold,
    )


def predict_labels(model: AspectModel, examples: Sequence[AspectExample], vocab: Vocab) -> tuple[list[str], np.ndarray]:
    probs, reps = model.predict(examples, vocab)
    return [POLARITIES[i] for i in probs.argmax(axis=1)], reps


def evaluate(model: AspectModel, examples: Sequence[AspectExample], vocab: Vocab, with_slices: bool = True) -> MetricsReport:
    if not examples:
        raise EmptyDatasetError("cannot evaluate an empty dataset")
    pred, _ = predict_labels(model, examples, vocab)
    tags = [ex.slice_tag for ex in examples] if with_slices else None
    return compute_metrics([ex.polarity for ex in examples], pred, tags)


def clustering_score(reps: np.ndarray, labels: Sequence) -> dict:
    """Mean same-label dot product minus mean cross-label dot product (pairs i != j)."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    gram = reps @ reps.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(n, dtype=bool)
    intra_mask = same & off
    inter_mask = ~same
    intra = float(gram[intra_mask].mean()) if intra_mask.any() else None
    inter = float(gram[inter_mask].mean()) if inter_mask.any() else None
    score = intra - inter if intra is not None and inter is not None else None
    return {"intra": intra, "inter": inter, "score": score}


def export_embeddings(model: AspectModel, examples: Sequence[AspectExample], vocab: Vocab, out_path) -> dict:
    """Write one CSV row per example (id, gold, slice, s components) and return clustering scores."""
    _, reps = predict_labels(model, examples, vocab) if examples else ([], np.zeros((0, model.cfg.d_model)))
    write_embeddings_csv(out_path, examples, reps)
    return embedding_summary(examples, reps)


def write_embeddings_csv(out_path, examples: Sequence[AspectExample], reps: np.ndarray) -> None:
    d = reps.shape[1] if reps.ndim == 2 else 0
    with Path(out_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "gold", "slice"] + [f"s{k}" for k in range(d)])
        for i, (ex, row) in enumerate(zip(examples, reps)):
            w.writerow([ex.example_id or str(i), ex.polarity, ex.slice_tag] + [repr(float(x)) for x in row])


def embedding_summary(examples: Sequence[AspectExample], reps: np.ndarray) -> dict:
    labels = [ex.polarity for ex in examples]
    out = {"rows": len(examples), "all": clustering_score(reps, labels) if len(examples) > 1 else None}
    for tag in ("ESE", "ISE"):
        idx = [i for i, ex in enumerate(examples) if ex.slice_tag == tag]
        out[tag] = clustering_score(reps[idx], [labels[i] for i in idx]) if len(idx) > 1 else None
    return out
