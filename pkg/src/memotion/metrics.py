"""Macro F1 and the three-score competition report (Subtasks A, B, C)."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dataio.labels import CATEGORY_TASKS, NUM_CLASSES, TASKS, coarsen
from .dataio.sample import collate
from .errors import InputError

# Test-set scores of the original ALBERT + VGG-16 fusion system; documentation only.
REFERENCE_TEST_SCORES = {"subtask_a": 0.3453, "subtask_b": 0.5183, "subtask_c": 0.3171}


def confusion_matrix(gold, pred, k: int) -> np.ndarray:
    """``k×k`` counts, rows = gold class, columns = predicted class."""
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if gold.shape != pred.shape:
        raise InputError(f"gold has {gold.size} labels, predictions have {pred.size}")
    if gold.size == 0:
        raise InputError("cannot score an empty label set")
    for name, arr in (("gold", gold), ("pred", pred)):
        if arr.min() < 0 or arr.max() >= k:
            raise InputError(f"{name} labels must lie in [0, {k})")
    return np.bincount(gold * k + pred, minlength=k * k).reshape(k, k)


def per_class_f1(cm: np.ndarray) -> list[Fraction]:
    """Exact F1 per class; 0 when the class never occurs in gold or predictions."""
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    scores = []
    for t, p, n in zip(tp.tolist(), fp.tolist(), fn.tolist()):
        denom = 2 * t + p + n
        scores.append(Fraction(2 * t, denom) if denom else Fraction(0))
    return scores


def macro_f1(gold, pred, k: int) -> float:
    """Unweighted mean of per-class F1 over all ``k`` classes."""
    scores = per_class_f1(confusion_matrix(gold, pred, k))
    return float(sum(scores, Fraction(0)) / k)


@dataclass
class CompetitionReport:
    subtask_a: float
    subtask_b: float
    subtask_c: float
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)

    def as_lines(self) -> list[str]:
        """``name<TAB>value`` lines, one metric each."""
        lines = [f"subtask_a\t{self.subtask_a:.6f}", f"subtask_b\t{self.subtask_b:.6f}", f"subtask_c\t{self.subtask_c:.6f}"]
        for level in ("fine", "binary"):
            for task, score in self.per_category.get(level, {}).items():
                lines.append(f"{level}.{task}\t{score:.6f}")
        return lines

    def table(self) -> str:
        rows = [
            f"{'Subtask A (sentiment)':<26}{self.subtask_a:>8.4f}",
            f"{'Subtask B (binary mean)':<26}{self.subtask_b:>8.4f}",
            f"{'Subtask C (scale mean)':<26}{self.subtask_c:>8.4f}",
            "",
            f"{'category':<14}{'fine F1':>10}{'binary F1':>11}",
        ]
        fine, binary = self.per_category.get("fine", {}), self.per_category.get("binary", {})
        for task in TASKS:
            b = f"{binary[task]:>11.4f}" if task in binary else f"{'-':>11}"
            rows.append(f"{task:<14}{fine.get(task, float('nan')):>10.4f}{b}")
        return "\n".join(rows)


def coarsen_labels(labels: np.ndarray) -> np.ndarray:
    """Apply the fine→binary map column-wise to an ``(N, 5)`` label array (sentiment untouched)."""
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    for i, task in enumerate(TASKS):
        if task in CATEGORY_TASKS:
            out[:, i] = [coarsen(task, int(v)) for v in labels[:, i]]
    return out


def binary_report_scores(gold_coarse: np.ndarray, pred_coarse: np.ndarray) -> dict[str, float]:
    return {task: macro_f1(gold_coarse[:, TASKS.index(task)], pred_coarse[:, TASKS.index(task)], 2) for task in CATEGORY_TASKS}


def competition_scores(pred, gold) -> CompetitionReport:
    """Score fine ``(N, 5)`` predictions against fine gold labels.

    A is sentiment macro F1; C the mean fine macro F1 of the four categories;
    B the same mean after coarsening both gold and predictions.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape or pred.ndim != 2 or pred.shape[1] != len(TASKS):
        raise InputError(f"expected matching (N, 5) label arrays, got {pred.shape} and {gold.shape}")
    fine = {task: macro_f1(gold[:, i], pred[:, i], NUM_CLASSES[task]) for i, task in enumerate(TASKS)}
    binary = binary_report_scores(coarsen_labels(gold), coarsen_labels(pred))
    return CompetitionReport(
        subtask_a=fine["sentiment"],
        subtask_b=float(np.mean([binary[t] for t in CATEGORY_TASKS])),
        subtask_c=float(np.mean([fine[t] for t in CATEGORY_TASKS])),
        per_category={"fine": fine, "binary": binary},
    )


def per_head_macro_f1(pred, gold) -> dict[str, float]:
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    return {task: macro_f1(gold[:, i], pred[:, i], NUM_CLASSES[task]) for i, task in enumerate(TASKS)}


def evaluate_model(model, samples, batch_size: int = 32) -> dict[str, float]:
    """Argmax-decode every head and return its macro F1 on ``samples``."""
    pred, gold = predict_labels(model, samples, batch_size)
    return per_head_macro_f1(pred, gold)


def predict_labels(model, samples, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    preds, golds = [], []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start : start + batch_size])
        preds.append(model.predict(batch))
        golds.append(batch.labels)
    return np.concatenate(preds), np.concatenate(golds)
