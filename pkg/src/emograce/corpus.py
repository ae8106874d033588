"""Multi-annotator span aggregation: majority voting, emotion resolution, splits.

Input records are per-annotator span annotations over documents (character
offsets count Unicode code points, end-exclusive). Exactly three annotators
per document are required; characters marked by at least two of them survive
into consensus spans.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import stream_generator


class EmotionLabel(str, Enum):
    HAPPINESS = "Happiness"
    ANGER = "Anger"
    SADNESS = "Sadness"
    FEAR = "Fear"
    NONE = "None"


class DocStatus(Enum):
    INCLUDED = "Included"
    EXCLUDED_NO_OVERLAP = "ExcludedNoOverlap"
    NEEDS_REVIEW = "NeedsReview"


class _Review(Enum):
    NEEDS_REVIEW = "NeedsReview"


#: Sentinel returned by :func:`resolve_emotion` when no majority label exists.
NEEDS_REVIEW = _Review.NEEDS_REVIEW


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    emotion: EmotionLabel

    def length(self) -> int:
        return self.end - self.start


@dataclass
class AnnotatorRecord:
    doc_id: str
    annotator_id: str
    text: str
    spans: list[Span]

    def validate(self) -> None:
        n = len(self.text)
        for s in self.spans:
            if not (0 <= s.start < s.end <= n):
                raise ValueError(
                    f"doc {self.doc_id!r}, annotator {self.annotator_id!r}: "
                    f"span ({s.start}, {s.end}) out of bounds for text of length {n}"
                )
        ordered = sorted(self.spans, key=lambda s: (s.start, s.end))
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.end:
                raise ValueError(
                    f"doc {self.doc_id!r}, annotator {self.annotator_id!r}: "
                    f"overlapping spans ({a.start}, {a.end}) and ({b.start}, {b.end})"
                )


@dataclass
class AnnotatedDocument:
    doc_id: str
    text: str
    spans: list[Span]
    status: DocStatus


@dataclass
class IAAReport:
    total_annotated_chars: int = 0
    kept_chars: int = 0
    removed_chars: int = 0
    retention_rate: float = 0.0
    docs_excluded: int = 0
    emotion_review_cases: int = 0

    def to_dict(self) -> dict:
        return {
            "total_annotated_chars": self.total_annotated_chars,
            "kept_chars": self.kept_chars,
            "removed_chars": self.removed_chars,
            "retention_rate": self.retention_rate,
            "docs_excluded": self.docs_excluded,
            "emotion_review_cases": self.emotion_review_cases,
        }


_EMOTION_VALUES = {e.value: e for e in EmotionLabel}


def _parse_record(obj: dict, where: str) -> AnnotatorRecord:
    for key in ("id", "annotator", "text", "labels"):
        if key not in obj:
            raise ValueError(f"{where}: missing field {key!r}")
    if not isinstance(obj["text"], str):
        raise ValueError(f"{where}: field 'text' must be a string")
    spans = []
    for triple in obj["labels"]:
        if not (isinstance(triple, (list, tuple)) and len(triple) == 3):
            raise ValueError(f"{where}: each label must be [start, end, emotion]")
        start, end, emo = triple
        if not (isinstance(start, int) and isinstance(end, int)):
            raise ValueError(f"{where}: span offsets must be integers")
        if emo not in _EMOTION_VALUES:
            raise ValueError(
                f"{where}: unknown emotion {emo!r} "
                f"(expected one of {sorted(_EMOTION_VALUES)})"
            )
        spans.append(Span(start, end, _EMOTION_VALUES[emo]))
    rec = AnnotatorRecord(
        doc_id=str(obj["id"]),
        annotator_id=str(obj["annotator"]),
        text=obj["text"],
        spans=spans,
    )
    try:
        rec.validate()
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None
    return rec


def load_annotations(path: str | Path) -> list[AnnotatorRecord]:
    """Read line-delimited annotator records, validating every line.

    Raises ValueError with the offending line number on malformed input, and
    when two annotators disagree on the text of the same document.
    """
    path = Path(path)
    records: list[AnnotatorRecord] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{where}: expected an object per line")
            records.append(_parse_record(obj, where))
    texts: dict[str, str] = {}
    for rec in records:
        prior = texts.setdefault(rec.doc_id, rec.text)
        if prior != rec.text:
            raise ValueError(
                f"doc {rec.doc_id!r}: annotators disagree on the document text"
            )
    return records


def merge_spans(
    records: Sequence[AnnotatorRecord],
) -> tuple[list[tuple[int, int]], DocStatus]:
    """Character-level majority vote over exactly three annotators.

    Characters marked by at least two annotators are kept; maximal contiguous
    kept runs become consensus spans. A document where all three annotators
    marked spans but nothing reached two votes is excluded.
    """
    if len(records) != 3:
        raise ValueError(f"expected exactly 3 annotator records, got {len(records)}")
    text = records[0].text
    if any(r.text != text for r in records[1:]):
        raise ValueError("annotator records disagree on document text")

    votes = [0] * len(text)
    for rec in records:
        for s in rec.spans:
            for i in range(s.start, s.end):
                votes[i] += 1

    runs: list[tuple[int, int]] = []
    start = None
    for i, v in enumerate(votes):
        if v >= 2 and start is None:
            start = i
        elif v < 2 and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(votes)))

    if runs:
        status = DocStatus.INCLUDED
    elif all(len(r.spans) >= 1 for r in records):
        status = DocStatus.EXCLUDED_NO_OVERLAP
    else:
        # Majority agrees the marked characters are not aspects; the document
        # stays in the corpus without labels.
        status = DocStatus.INCLUDED
    return runs, status


def _overlap(a_start: int, a_end: int, b_start: int, b_end: int) -> int:
    return max(0, min(a_end, b_end) - max(a_start, b_start))


def resolve_emotion(
    consensus_span: tuple[int, int], records: Sequence[AnnotatorRecord]
) -> EmotionLabel | _Review:
    """Majority emotion for one consensus span.

    Each annotator votes with the emotion of their span that overlaps the
    consensus span the most (ties go to the earlier-starting span). Returns
    NEEDS_REVIEW when no label has strictly more votes than every other.
    """
    cs, ce = consensus_span
    votes: Counter[EmotionLabel] = Counter()
    for rec in records:
        best = None
        best_key = None
        for s in rec.spans:
            ov = _overlap(cs, ce, s.start, s.end)
            if ov <= 0:
                continue
            key = (-ov, s.start)
            if best_key is None or key < best_key:
                best, best_key = s, key
        if best is not None:
            votes[best.emotion] += 1
    if not votes:
        raise ValueError("consensus span has no overlapping annotator span")
    ranked = votes.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return NEEDS_REVIEW
    return ranked[0][0]


def build_corpus(
    records: Iterable[AnnotatorRecord],
) -> tuple[list[AnnotatedDocument], IAAReport, list[dict]]:
    """Aggregate all annotator records into consensus documents.

    Returns (corpus documents, agreement report, review cases). Documents
    containing a span without a majority emotion are routed to the review
    list instead of the corpus; the report counts each reviewed span.
    """
    by_doc: dict[str, list[AnnotatorRecord]] = {}
    for rec in records:
        by_doc.setdefault(rec.doc_id, []).append(rec)

    docs: list[AnnotatedDocument] = []
    review: list[dict] = []
    report = IAAReport()
    for doc_id, recs in by_doc.items():
        if len(recs) != 3:
            raise ValueError(
                f"doc {doc_id!r}: expected 3 annotator records, got {len(recs)}"
            )
        text = recs[0].text
        votes = [0] * len(text)
        for rec in recs:
            for s in rec.spans:
                for i in range(s.start, s.end):
                    votes[i] += 1
        report.total_annotated_chars += sum(votes)
        report.kept_chars += sum(v for v in votes if v >= 2)

        runs, status = merge_spans(recs)
        if status is DocStatus.EXCLUDED_NO_OVERLAP:
            report.docs_excluded += 1
            continue

        spans: list[Span] = []
        unresolved: list[tuple[int, int]] = []
        for run in runs:
            emo = resolve_emotion(run, recs)
            if emo is NEEDS_REVIEW:
                unresolved.append(run)
            else:
                spans.append(Span(run[0], run[1], emo))
        if unresolved:
            report.emotion_review_cases += len(unresolved)
            resolved = {(s.start, s.end): s.emotion.value for s in spans}
            review.append(
                {
                    "id": doc_id,
                    "text": text,
                    "spans": [
                        {
                            "start": r[0],
                            "end": r[1],
                            "emotion": resolved.get(r, None),
                        }
                        for r in runs
                    ],
                }
            )
            continue
        docs.append(AnnotatedDocument(doc_id, text, spans, DocStatus.INCLUDED))

    report.removed_chars = report.total_annotated_chars - report.kept_chars
    if report.total_annotated_chars > 0:
        report.retention_rate = report.kept_chars / report.total_annotated_chars
    return docs, report, review


def split_corpus(
    corpus: Sequence[AnnotatedDocument],
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[list[AnnotatedDocument], list[AnnotatedDocument], list[AnnotatedDocument]]:
    """Deterministic shuffled train/val/test split.

    Split sizes are floor(ratio * N) with any remainder assigned to train.
    """
    r_train, r_val, r_test = ratios
    if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be non-negative and sum to 1")
    n = len(corpus)
    n_train = int(np.floor(r_train * n))
    n_val = int(np.floor(r_val * n))
    n_test = int(np.floor(r_test * n))
    n_train += n - (n_train + n_val + n_test)
    order = stream_generator(seed, "corpus/split").permutation(n)
    train = [corpus[i] for i in order[:n_train]]
    val = [corpus[i] for i in order[n_train : n_train + n_val]]
    test = [corpus[i] for i in order[n_train + n_val :]]
    return train, val, test


def corpus_stats(corpus: Sequence[AnnotatedDocument]) -> dict:
    """Exact span/emotion tallies over a corpus."""
    lengths = [s.length() for d in corpus for s in d.spans]
    per_doc = [len(d.spans) for d in corpus]
    emotions = Counter(s.emotion.value for d in corpus for s in d.spans)
    return {
        "n_docs": len(corpus),
        "n_spans": len(lengths),
        "emotion_counts": {e.value: emotions.get(e.value, 0) for e in EmotionLabel},
        "span_length_chars": {
            "min": min(lengths) if lengths else 0,
            "max": max(lengths) if lengths else 0,
            "mean": (sum(lengths) / len(lengths)) if lengths else 0.0,
        },
        "spans_per_doc": {
            "min": min(per_doc) if per_doc else 0,
            "max": max(per_doc) if per_doc else 0,
            "mean": (sum(per_doc) / len(per_doc)) if per_doc else 0.0,
        },
    }


def document_to_json(doc: AnnotatedDocument) -> dict:
    return {
        "id": doc.doc_id,
        "text": doc.text,
        "spans": [
            {"start": s.start, "end": s.end, "emotion": s.emotion.value}
            for s in doc.spans
        ],
    }


def document_from_json(obj: dict, where: str = "<corpus>") -> AnnotatedDocument:
    for key in ("id", "text", "spans"):
        if key not in obj:
            raise ValueError(f"{where}: missing field {key!r}")
    spans = []
    for s in obj["spans"]:
        emo = s.get("emotion")
        if emo not in _EMOTION_VALUES:
            raise ValueError(f"{where}: unknown emotion {emo!r}")
        spans.append(Span(int(s["start"]), int(s["end"]), _EMOTION_VALUES[emo]))
    return AnnotatedDocument(str(obj["id"]), obj["text"], spans, DocStatus.INCLUDED)


def read_corpus(path: str | Path) -> list[AnnotatedDocument]:
    docs = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path.name}:{lineno}: invalid JSON ({exc.msg})") from None
            docs.append(document_from_json(obj, f"{path.name}:{lineno}"))
    return docs
