import numpy as np
import pytest

from emograce.corpus import AnnotatedDocument, AnnotatorRecord, DocStatus, EmotionLabel, Span

TINY_MODEL_FIELDS = {
    "d_model": 32,
    "n_heads": 2,
    "total_encoder_layers": 2,
    "shared_layers": 1,
    "aec_decoder_layers": 1,
    "max_seq_len": 8,
}

TEMPLATE_VERBS = {
    "adore": EmotionLabel.HAPPINESS,
    "hate": EmotionLabel.ANGER,
    "miss": EmotionLabel.SADNESS,
    "fear": EmotionLabel.FEAR,
}
TEMPLATE_NOUNS = ["park", "dog", "train", "river", "game", "storm", "crowd", "photo"]


def make_templated_corpus() -> list[AnnotatedDocument]:
    """32 sentences, 4 emotions, one templated aspect span each."""
    docs = []
    i = 0
    for verb, emo in TEMPLATE_VERBS.items():
        for noun in TEMPLATE_NOUNS:
            text = f"I {verb} the {noun} ."
            start = text.index(f"the {noun}")
            docs.append(
                AnnotatedDocument(
                    f"doc{i}",
                    text,
                    [Span(start, start + len(f"the {noun}"), emo)],
                    DocStatus.INCLUDED,
                )
            )
            i += 1
    return docs


@pytest.fixture(scope="session")
def templated_corpus() -> list[AnnotatedDocument]:
    return make_templated_corpus()


def record(doc_id: str, annotator: str, text: str, spans) -> AnnotatorRecord:
    rec = AnnotatorRecord(
        doc_id,
        annotator,
        text,
        [Span(s[0], s[1], s[2] if len(s) > 2 else EmotionLabel.NONE) for s in spans],
    )
    rec.validate()
    return rec


def random_mask_records(rng: np.random.Generator, text_len: int) -> list[AnnotatorRecord]:
    """Three annotators whose spans are the runs of random character masks."""
    text = "x" * text_len
    emotions = list(EmotionLabel)
    recs = []
    for a in range(3):
        mask = rng.random(text_len) < rng.uniform(0.1, 0.6)
        spans = []
        start = None
        for i, m in enumerate(mask):
            if m and start is None:
                start = i
            elif not m and start is not None:
                spans.append((start, i, emotions[rng.integers(len(emotions))]))
                start = None
        if start is not None:
            spans.append((start, text_len, emotions[rng.integers(len(emotions))]))
        recs.append(record("d", f"a{a}", text, spans))
    return recs
