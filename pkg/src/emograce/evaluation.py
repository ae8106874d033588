"""Span-level metrics, sentence-level emotion aggregation, and k-fold CV.

Span scoring is micro-averaged over the whole dataset: a true positive for
the extraction metric is an exact character-range match, and the joint
metric additionally requires the emotion to match. Gold spans are snapped to
token boundaries before matching so gold and predictions live on the same
grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .corpus import AnnotatedDocument, EmotionLabel, Span
from .model import EmoGraceModel, predict
from .rng import stream_generator
from .textseg import snap_spans


class _Sentinel(Enum):
    EXCLUDED = "Excluded"


#: Sentence-level outcome when a document carries several distinct emotions.
EXCLUDED = _Sentinel.EXCLUDED


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def metrics_from_counts(tp: int, fp: int, fn: int) -> Metrics:
    """P/R/F1 with the empty-set conventions: an empty prediction set scores
    precision 1 only when gold is empty too (and symmetrically for recall)."""
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(tp, fp, fn, precision, recall, f1)


def _check_no_overlap(spans: Sequence[Span], what: str) -> None:
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise ValueError(f"{what} spans overlap: ({a.start},{a.end}) and ({b.start},{b.end})")


def span_prf(
    gold: Sequence[Sequence[Span]], pred: Sequence[Sequence[Span]]
) -> Metrics:
    """Extraction-only metric: exact character ranges, emotions ignored."""
    if len(gold) != len(pred):
        raise ValueError("gold and pred must cover the same documents")
    tp = fp = fn = 0
    for g_spans, p_spans in zip(gold, pred):
        _check_no_overlap(g_spans, "gold")
        _check_no_overlap(p_spans, "predicted")
        g = {(s.start, s.end) for s in g_spans}
        p = {(s.start, s.end) for s in p_spans}
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    return metrics_from_counts(tp, fp, fn)


def joint_prf(
    gold: Sequence[Sequence[Span]], pred: Sequence[Sequence[Span]]
) -> Metrics:
    """Joint metric: a true positive needs the exact range and the emotion."""
    if len(gold) != len(pred):
        raise ValueError("gold and pred must cover the same documents")
    tp = fp = fn = 0
    for g_spans, p_spans in zip(gold, pred):
        _check_no_overlap(g_spans, "gold")
        _check_no_overlap(p_spans, "predicted")
        g = {(s.start, s.end, s.emotion) for s in g_spans}
        p = {(s.start, s.end, s.emotion) for s in p_spans}
        tp += len(g & p)
        fp += len(p - g)
        fn += len(g - p)
    return metrics_from_counts(tp, fp, fn)


def sentence_emotion(pred_spans: Sequence[Span]) -> EmotionLabel | _Sentinel:
    """Collapse a document's predicted spans to one emotion: the single
    distinct non-None label, None when there is none, EXCLUDED when several
    distinct labels appear."""
    distinct = {s.emotion for s in pred_spans if s.emotion is not EmotionLabel.NONE}
    if not distinct:
        return EmotionLabel.NONE
    if len(distinct) == 1:
        return next(iter(distinct))
    return EXCLUDED


@dataclass
class EvalReport:
    ate: Metrics
    joint: Metrics
    confusion: dict[tuple[str, str], int]
    gold_emotion_counts: dict[str, int]
    pred_emotion_counts: dict[str, int]
    per_class: dict[str, Metrics]
    macro_f1: float
    n_docs: int

    def to_dict(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "ate": self.ate.to_dict(),
            "joint": self.joint.to_dict(),
            "macro_f1": self.macro_f1,
            "per_class": {c: m.to_dict() for c, m in sorted(self.per_class.items())},
            "confusion": {f"{g}->{p}": c for (g, p), c in sorted(self.confusion.items())},
            "gold_emotion_counts": dict(sorted(self.gold_emotion_counts.items())),
            "pred_emotion_counts": dict(sorted(self.pred_emotion_counts.items())),
        }

    def format_table(self) -> str:
        rows = [
            ("", "P", "R", "F1", "TP", "FP", "FN"),
            (
                "ATE",
                f"{self.ate.precision:.4f}",
                f"{self.ate.recall:.4f}",
                f"{self.ate.f1:.4f}",
                str(self.ate.tp),
                str(self.ate.fp),
                str(self.ate.fn),
            ),
            (
                "ATE+AEC",
                f"{self.joint.precision:.4f}",
                f"{self.joint.recall:.4f}",
                f"{self.joint.f1:.4f}",
                str(self.joint.tp),
                str(self.joint.fp),
                str(self.joint.fn),
            ),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in rows
        )


def evaluate(model: EmoGraceModel, docs: Sequence[AnnotatedDocument]) -> EvalReport:
    """Predict every document and score extraction and joint metrics.

    Micro metrics pool counts over the corpus; per_class holds the joint
    counts restricted to each emotion, and macro_f1 averages the per-class F1
    over classes with any gold or predicted support. The confusion counts
    cover exact-range matches (gold emotion vs predicted).
    """
    gold_all: list[list[Span]] = []
    pred_all: list[list[Span]] = []
    confusion: dict[tuple[str, str], int] = {}
    gold_counts: dict[str, int] = {e.value: 0 for e in EmotionLabel}
    pred_counts: dict[str, int] = {e.value: 0 for e in EmotionLabel}
    class_tp: dict[str, int] = {e.value: 0 for e in EmotionLabel}
    for doc in docs:
        gold = snap_spans(doc.text, doc.spans)
        pred = predict(model, doc.text)
        gold_all.append(gold)
        pred_all.append(pred)
        for s in gold:
            gold_counts[s.emotion.value] += 1
        for s in pred:
            pred_counts[s.emotion.value] += 1
        matched = {(s.start, s.end, s.emotion) for s in gold}
        for s in pred:
            if (s.start, s.end, s.emotion) in matched:
                class_tp[s.emotion.value] += 1
        by_range = {(s.start, s.end): s.emotion for s in gold}
        for s in pred:
            g_emo = by_range.get((s.start, s.end))
            if g_emo is not None:
                key = (g_emo.value, s.emotion.value)
                confusion[key] = confusion.get(key, 0) + 1
    per_class = {
        c: metrics_from_counts(
            class_tp[c], pred_counts[c] - class_tp[c], gold_counts[c] - class_tp[c]
        )
        for c in class_tp
    }
    supported = [
        per_class[c].f1 for c in per_class if gold_counts[c] + pred_counts[c] > 0
    ]
    return EvalReport(
        ate=span_prf(gold_all, pred_all),
        joint=joint_prf(gold_all, pred_all),
        confusion=confusion,
        gold_emotion_counts=gold_counts,
        pred_emotion_counts=pred_counts,
        per_class=per_class,
        macro_f1=float(np.mean(supported)) if supported else 0.0,
        n_docs=len(docs),
    )


#: Mapping to the label names used by external sentence-level emotion data.
EXTERNAL_EMOTION_NAMES = {
    EmotionLabel.HAPPINESS: "joy",
    EmotionLabel.ANGER: "anger",
    EmotionLabel.SADNESS: "sadness",
    EmotionLabel.FEAR: "fear",
}


def external_sentence_f1(
    model: EmoGraceModel, records: Sequence[dict]
) -> float:
    """Macro F1 over the four emotion classes on {text, emotion} records.

    Documents whose predictions mix several emotions are excluded; a None
    aggregate counts against the gold class (a miss, never a false alarm).
    """
    class_names = sorted(EXTERNAL_EMOTION_NAMES.values())
    tp = {c: 0 for c in class_names}
    fp = {c: 0 for c in class_names}
    fn = {c: 0 for c in class_names}
    for rec in records:
        gold = rec["emotion"]
        if gold not in tp:
            raise ValueError(f"unknown external emotion label {gold!r}")
        outcome = sentence_emotion(predict(model, rec["text"]))
        if outcome is EXCLUDED:
            continue
        predicted = EXTERNAL_EMOTION_NAMES.get(outcome)
        if predicted == gold:
            tp[gold] += 1
        else:
            fn[gold] += 1
            if predicted is not None:
                fp[predicted] += 1
    f1s = []
    for c in class_names:
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        f1s.append(metrics_from_counts(tp[c], fp[c], fn[c]).f1)
    return float(np.mean(f1s)) if f1s else 0.0


def make_folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic k-way partition; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError("need at least k documents")
    order = stream_generator(seed, "cv/folds").permutation(n)
    return [np.sort(part) for part in np.array_split(order, k)]


def cross_validate(
    corpus: Sequence[AnnotatedDocument],
    model_fields: dict,
    train_config,
    k: int = 10,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> dict:
    """k-fold cross-validation: each fold is the test set exactly once; the
    remaining documents are split into a training set and a small validation
    carve-out used for best-checkpoint selection."""
    from .trainer import run_training  # late import to avoid a module cycle

    folds = make_folds(len(corpus), k, seed)
    per_fold = []
    for fi, test_idx in enumerate(folds):
        test_set = set(int(i) for i in test_idx)
        rest = [corpus[i] for i in range(len(corpus)) if i not in test_set]
        n_val = min(len(rest) - 1, max(1, math.floor(val_fraction * len(rest))))
        order = stream_generator(seed, f"cv/val_carve/{fi}").permutation(len(rest))
        val_docs = [rest[i] for i in order[:n_val]]
        train_docs = [rest[i] for i in order[n_val:]]
        model, _ = run_training((train_docs, val_docs, []), model_fields, train_config)
        report = evaluate(model, [corpus[i] for i in test_idx])
        per_fold.append(
            {
                "fold": fi,
                "n_test": int(len(test_idx)),
                "ate_f1": report.ate.f1,
                "joint_f1": report.joint.f1,
            }
        )
    return {
        "k": k,
        "per_fold": per_fold,
        "mean_ate_f1": float(np.mean([f["ate_f1"] for f in per_fold])),
        "mean_joint_f1": float(np.mean([f["joint_f1"] for f in per_fold])),
    }
