"""Aspect-emotion corpus building, the two-branch cascaded labeler, and its
training/evaluation/sweep toolkit."""

from .corpus import (
    AnnotatedDocument,
    AnnotatorRecord,
    DocStatus,
    EmotionLabel,
    IAAReport,
    Span,
    build_corpus,
    corpus_stats,
    load_annotations,
    merge_spans,
    resolve_emotion,
    split_corpus,
)
from .evaluation import EvalReport, Metrics, cross_validate, evaluate, joint_prf, span_prf
from .hpo import ScoreVector, averaged_performance, greedy_sweep
from .losses import GhlState, VatConfig, cross_entropy, ghl_loss, vat_loss
from .model import EmoGraceModel, ModelConfig, Vocab, forward_aec, forward_ate, init_model, predict
from .textseg import TaggedSequence, Token, decode_spans, encode_tags, tokenize
from .trainer import TrainConfig, lr_at, run_training, train_phase

__version__ = "0.1.0"

__all__ = [
    "AnnotatedDocument",
    "AnnotatorRecord",
    "DocStatus",
    "EmotionLabel",
    "EvalReport",
    "EmoGraceModel",
    "GhlState",
    "IAAReport",
    "Metrics",
    "ModelConfig",
    "ScoreVector",
    "Span",
    "TaggedSequence",
    "Token",
    "TrainConfig",
    "VatConfig",
    "Vocab",
    "averaged_performance",
    "build_corpus",
    "corpus_stats",
    "cross_entropy",
    "cross_validate",
    "decode_spans",
    "encode_tags",
    "evaluate",
    "forward_aec",
    "forward_ate",
    "ghl_loss",
    "greedy_sweep",
    "init_model",
    "joint_prf",
    "load_annotations",
    "lr_at",
    "merge_spans",
    "predict",
    "resolve_emotion",
    "run_training",
    "span_prf",
    "split_corpus",
    "tokenize",
    "train_phase",
    "vat_loss",
]
