"""Tokenization and conversion between character spans and token tag rows.

The tag alphabets are the model's native label sets: B/I/O for aspect term
extraction and HAP/ANG/SAD/FEA/NONE/O for aspect emotion classification.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import EmotionLabel, Span

ATE_TAGS = ("B", "I", "O")
EMO_TAGS = ("HAP", "ANG", "SAD", "FEA", "NONE", "O")

EMOTION_TO_TAG = {
    EmotionLabel.HAPPINESS: "HAP",
    EmotionLabel.ANGER: "ANG",
    EmotionLabel.SADNESS: "SAD",
    EmotionLabel.FEAR: "FEA",
    EmotionLabel.NONE: "NONE",
}
TAG_TO_EMOTION = {tag: emo for emo, tag in EMOTION_TO_TAG.items()}


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


@dataclass
class TaggedSequence:
    doc_id: str
    tokens: list[Token]
    ate_tags: list[str]
    emo_tags: list[str]

    def __post_init__(self) -> None:
        if not (len(self.tokens) == len(self.ate_tags) == len(self.emo_tags)):
            raise ValueError("tokens, ate_tags and emo_tags must align")


def _is_wordish(ch: str) -> bool:
    return ch.isalnum() or ch == "'"


def tokenize(text: str) -> list[Token]:
    """Whitespace split, then separate alphanumeric(+apostrophe) runs from
    punctuation/symbol runs. Offsets cover every non-space character once."""
    tokens: list[Token] = []
    start = None
    wordish = False
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                tokens.append(Token(text[start:i], start, i))
                start = None
            continue
        cls = _is_wordish(ch)
        if start is None:
            start, wordish = i, cls
        elif cls != wordish:
            tokens.append(Token(text[start:i], start, i))
            start, wordish = i, cls
    if start is not None:
        tokens.append(Token(text[start:], start, len(text)))
    return tokens


def encode_tags(text: str, spans: Sequence[Span], doc_id: str = "") -> TaggedSequence:
    """Project character spans onto token tags.

    A token belongs to a span when their ranges overlap by at least one
    character; the first token of a span gets B, later ones I.
    """
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise ValueError(
                f"overlapping spans ({a.start}, {a.end}) and ({b.start}, {b.end})"
            )
    tokens = tokenize(text)
    ate = ["O"] * len(tokens)
    emo = ["O"] * len(tokens)
    claimed = [False] * len(tokens)
    for span in ordered:
        first = True
        for idx, tok in enumerate(tokens):
            if claimed[idx]:
                continue
            if tok.start < span.end and tok.end > span.start:
                ate[idx] = "B" if first else "I"
                emo[idx] = EMOTION_TO_TAG[span.emotion]
                claimed[idx] = True
                first = False
    return TaggedSequence(doc_id, tokens, ate, emo)


def decode_spans(tagged: TaggedSequence) -> list[Span]:
    """Reconstruct character spans from (possibly malformed) tag rows.

    A stray I acts as B. Span emotion is the majority over the run's non-O
    emotion tags, ties resolved by the earliest run token carrying a tied
    label; an all-O run maps to the None emotion.
    """
    runs: list[list[int]] = []
    for idx, tag in enumerate(tagged.ate_tags):
        if tag == "B":
            runs.append([idx])
        elif tag == "I":
            if runs and runs[-1][-1] == idx - 1:
                runs[-1].append(idx)
            else:
                runs.append([idx])
    spans: list[Span] = []
    for run in runs:
        emo_tags = [tagged.emo_tags[i] for i in run if tagged.emo_tags[i] != "O"]
        if not emo_tags:
            emotion = EmotionLabel.NONE
        else:
            counts = Counter(emo_tags)
            top = max(counts.values())
            tied = {t for t, c in counts.items() if c == top}
            winner = next(t for t in emo_tags if t in tied)
            emotion = TAG_TO_EMOTION[winner]
        spans.append(
            Span(tagged.tokens[run[0]].start, tagged.tokens[run[-1]].end, emotion)
        )
    return spans


def snap_spans(text: str, spans: Sequence[Span]) -> list[Span]:
    """Token-boundary closure of spans: the decode of their encoding."""
    return decode_spans(encode_tags(text, spans))


def to_conll(sequences: Iterable[TaggedSequence]) -> str:
    """One token per line `token<TAB>ate<TAB>emo`, blank line between docs."""
    blocks = []
    for seq in sequences:
        lines = [
            f"{tok.text}\t{a}\t{e}"
            for tok, a, e in zip(seq.tokens, seq.ate_tags, seq.emo_tags)
        ]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")
