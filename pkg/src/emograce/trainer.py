"""Three-step training schedule.

Steps 1 and 2 train the extraction branch only (step 2 optionally adds the
adversarial smoothing term); step 3 trains both branches jointly with the
emotion branch fed soft predicted tag distributions. Optimizer state is
created fresh per step; the harmonized-loss bin densities persist across
steps and are serialized into checkpoints.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedDocument, Span
from .losses import GhlState, VatConfig, cross_entropy, ghl_loss, vat_loss
from .model import (
    EmoGraceModel,
    ModelConfig,
    Vocab,
    encoder_layer_index,
    forward_aec,
    forward_ate,
    init_model,
    is_aec_param,
    save_model,
    PAD_ID,
)
from .rng import stream_generator, stream_key
from .textseg import ATE_TAGS, EMO_TAGS, encode_tags, snap_spans

ATE_TAG_TO_ID = {t: i for i, t in enumerate(ATE_TAGS)}
EMO_TAG_TO_ID = {t: i for i, t in enumerate(EMO_TAGS)}
_ATE_PAD = ATE_TAG_TO_ID["O"]
_EMO_PAD = EMO_TAG_TO_ID["O"]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    grad_accumulation: int = 2
    dropout: float = 0.1
    weight_decay: float = 0.01
    epochs: tuple[int, int, int] = (5, 3, 10)
    learning_rates: tuple[float, float, float] = (3e-5, 1e-5, 3e-6)
    warmup_method: str = "linear"
    warmup_proportion: float = 0.1
    ghl_ate_steps: tuple[bool, bool, bool] = (True, True, True)
    ghl_aec_steps: tuple[bool, bool, bool] = (True, True, True)
    ghl_bins: int = 24
    ghl_momentum: float = 0.75
    vat_steps: tuple[bool, bool, bool] = (False, True, False)
    vat_epsilon: float = 1.0
    vat_xi: float = 1e-6
    teacher_forcing: bool = False
    freeze_bottom_layers: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("batch_size and grad_accumulation must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ValueError("epochs must be three non-negative integers")
        if len(self.learning_rates) != 3 or any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning_rates must be three positive values")
        if self.warmup_method not in ("linear", "constant"):
            raise ValueError("warmup_method must be 'linear' or 'constant'")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ValueError("warmup_proportion must lie in [0, 1]")
        if self.freeze_bottom_layers < 0:
            raise ValueError("freeze_bottom_layers must be >= 0")


_TRAIN_FILE_KEYS = {
    "batch_size": "batch_size",
    "grad_accumulation": "grad_accumulation",
    "dropout": "dropout",
    "weight_decay": "weight_decay",
    "warmup_method": "warmup_method",
    "warmup_proportion": "warmup_proportion",
    "ghl_bins": "ghl_bins",
    "ghl_momentum": "ghl_momentum",
    "vat_epsilon": "vat_epsilon",
    "vat_xi": "vat_xi",
    "teacher_forcing": "teacher_forcing",
    "freeze_bottom_layers": "freeze_bottom_layers",
    "seed": "seed",
}


def train_config_from_dict(d: dict) -> TrainConfig:
    kwargs: dict = {}
    d = dict(d)
    for step_field, prefix in (("epochs", "epochs_step_"), ("learning_rates", "lr_step_")):
        keys = [f"{prefix}{i}" for i in (1, 2, 3)]
        if any(k in d for k in keys):
            base = getattr(TrainConfig, "__dataclass_fields__")[step_field].default
            kwargs[step_field] = tuple(d.pop(k, base[i]) for i, k in enumerate(keys))
    for tuple_key in ("ghl_ate_steps", "ghl_aec_steps", "vat_steps"):
        if tuple_key in d:
            kwargs[tuple_key] = tuple(bool(v) for v in d.pop(tuple_key))
    for file_key, field_name in _TRAIN_FILE_KEYS.items():
        if file_key in d:
            kwargs[field_name] = d.pop(file_key)
    if d:
        raise ValueError(f"unknown train config keys: {sorted(d)}")
    return TrainConfig(**kwargs)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for i in (1, 2, 3):
        out[f"epochs_step_{i}"] = cfg.epochs[i - 1]
        out[f"lr_step_{i}"] = cfg.learning_rates[i - 1]
    for file_key, field_name in _TRAIN_FILE_KEYS.items():
        out[file_key] = getattr(cfg, field_name)
    out["ghl_ate_steps"] = list(cfg.ghl_ate_steps)
    out["ghl_aec_steps"] = list(cfg.ghl_aec_steps)
    out["vat_steps"] = list(cfg.vat_steps)
    return out


_MODEL_FILE_KEYS = (
    "d_model",
    "n_heads",
    "total_encoder_layers",
    "shared_layers",
    "aec_decoder_layers",
    "max_seq_len",
)


def load_config_file(path: str | Path) -> tuple[dict, TrainConfig]:
    """Read a {"model": {...}, "train": {...}} config document. The model
    section is returned as a dict because vocab_size is data-dependent."""
    with Path(path).open(encoding="utf-8") as fh:
        obj = json.load(fh)
    model_d = dict(obj.get("model", {}))
    unknown = set(model_d) - set(_MODEL_FILE_KEYS)
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    return model_d, train_config_from_dict(obj.get("train", {}))


def build_model_config(model_fields: dict, vocab_size: int, dropout: float) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, dropout_rate=dropout, **model_fields)


def lr_at(config: TrainConfig, phase: int, step_index: int, total_steps: int) -> float:
    """Learning rate at one optimizer step of a phase.

    Ramps linearly to the phase peak over round(warmup_proportion * total)
    steps, then either decays linearly to zero at total_steps or holds the
    peak, per warmup_method.
    """
    if not 0 <= step_index < total_steps:
        raise ValueError("step_index must lie in [0, total_steps)")
    peak = config.learning_rates[phase - 1]
    w = round(config.warmup_proportion * total_steps)
    if step_index < w:
        return peak * (step_index + 1) / w
    if config.warmup_method == "constant" or total_steps == w:
        return peak
    if w == 0:
        # degenerate window: no ramp, the first step itself is the peak
        return peak * (total_steps - step_index) / total_steps
    return peak * (total_steps - (step_index + 1)) / (total_steps - w)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay (decay scales
    with the learning rate, not the gradient)."""

    def __init__(
        self,
        named_params: Sequence[tuple[str, Tensor]],
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.named_params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


@dataclass
class EncodedDoc:
    doc_id: str
    text: str
    token_ids: np.ndarray
    ate_ids: np.ndarray
    emo_ids: np.ndarray
    gold_spans: list[Span]


def encode_dataset(
    docs: Sequence[AnnotatedDocument], vocab: Vocab, max_seq_len: int
) -> list[EncodedDoc]:
    """Token/tag encoding for training; documents longer than max_seq_len are
    truncated to their leading tokens; token-free documents are dropped."""
    out = []
    for doc in docs:
        seq = encode_tags(doc.text, doc.spans, doc.doc_id)
        if not seq.tokens:
            continue
        tokens = seq.tokens[:max_seq_len]
        out.append(
            EncodedDoc(
                doc_id=doc.doc_id,
                text=doc.text,
                token_ids=vocab.encode([t.text for t in tokens]),
                ate_ids=np.array(
                    [ATE_TAG_TO_ID[t] for t in seq.ate_tags[:max_seq_len]], dtype=np.int64
                ),
                emo_ids=np.array(
                    [EMO_TAG_TO_ID[t] for t in seq.emo_tags[:max_seq_len]], dtype=np.int64
                ),
                gold_spans=snap_spans(doc.text, doc.spans),
            )
        )
    return out


def collate(
    batch: Sequence[EncodedDoc],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    t_max = max(len(d.token_ids) for d in batch)
    b = len(batch)
    ids = np.full((b, t_max), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=np.float64)
    ate = np.full((b, t_max), _ATE_PAD, dtype=np.int64)
    emo = np.full((b, t_max), _EMO_PAD, dtype=np.int64)
    for i, d in enumerate(batch):
        n = len(d.token_ids)
        ids[i, :n] = d.token_ids
        mask[i, :n] = 1.0
        ate[i, :n] = d.ate_ids
        emo[i, :n] = d.emo_ids
    return ids, mask, ate, emo


def _ate_loss(logits, ate_t, mask, config, phase, ghl_ate):
    if config.ghl_ate_steps[phase - 1]:
        loss, _ = ghl_loss(logits, ate_t, mask, ghl_ate)
        return loss
    return cross_entropy(logits, ate_t, mask)


def _batch_loss(
    model: EmoGraceModel,
    ids: np.ndarray,
    mask: np.ndarray,
    ate_t: np.ndarray,
    emo_t: np.ndarray,
    config: TrainConfig,
    phase: int,
    ghl_ate: GhlState,
    ghl_aec: GhlState,
    rng: np.random.Generator | None,
    vat_seed: int,
) -> Tensor:
    vat_cfg = VatConfig(config.vat_epsilon, config.vat_xi)
    if phase < 3:
        logits = forward_ate(model, ids, mask, dropout=config.dropout, rng=rng)
        loss = _ate_loss(logits, ate_t, mask, config, phase, ghl_ate)
        if config.vat_steps[phase - 1]:
            loss = loss + vat_loss(model, ids, mask, vat_cfg, vat_seed, branch="ate")
        return loss

    ate_logits, hidden = forward_ate(
        model, ids, mask, dropout=config.dropout, rng=rng, return_hidden=True
    )
    loss = _ate_loss(ate_logits, ate_t, mask, config, phase, ghl_ate)
    if config.teacher_forcing:
        dist = ad.constant(np.eye(len(ATE_TAGS))[ate_t])
    else:
        dist = ad.softmax(ate_logits)
    aec_logits = forward_aec(
        model, ids, mask, dist, hidden=hidden, dropout=config.dropout, rng=rng
    )
    if config.ghl_aec_steps[phase - 1]:
        aec_loss, _ = ghl_loss(aec_logits, emo_t, mask, ghl_aec)
    else:
        aec_loss = cross_entropy(aec_logits, emo_t, mask)
    loss = loss + aec_loss
    if config.vat_steps[phase - 1]:
        loss = loss + vat_loss(model, ids, mask, vat_cfg, vat_seed, branch="ate")
        loss = loss + vat_loss(
            model, ids, mask, vat_cfg, vat_seed, branch="aec", ate_label_dist=dist.data.copy()
        )
    return loss


def trainable_parameters(
    model: EmoGraceModel, phase: int, freeze_bottom_layers: int
) -> list[tuple[str, Tensor]]:
    out = []
    for name, p in model.params.items():
        if phase < 3 and is_aec_param(name):
            continue
        layer = encoder_layer_index(name)
        if layer is not None and layer < freeze_bottom_layers:
            continue
        out.append((name, p))
    return out


def train_phase(
    model: EmoGraceModel,
    data: Sequence[EncodedDoc],
    config: TrainConfig,
    phase: int,
    ghl_ate: GhlState,
    ghl_aec: GhlState,
    *,
    start_epoch: int = 0,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run one schedule step; returns per-epoch log entries. `on_epoch` fires
    after each epoch (validation scoring and checkpoint tracking hook)."""
    if phase not in (1, 2, 3):
        raise ValueError("phase must be 1, 2 or 3")
    epochs = config.epochs[phase - 1]
    if epochs <= 0:
        raise ValueError("train_phase requires a positive epoch count")
    if not data:
        raise ValueError("empty training dataset")

    named = trainable_parameters(model, phase, config.freeze_bottom_layers)
    tensors = [p for _, p in named]
    opt = AdamW(named, weight_decay=config.weight_decay)
    n_batches = math.ceil(len(data) / config.batch_size)
    updates_per_epoch = math.ceil(n_batches / config.grad_accumulation)
    total_updates = epochs * updates_per_epoch

    entries = []
    update_idx = 0
    for epoch in range(epochs):
        # streams are keyed by epoch, not phase: a step 2 without the
        # adversarial term must replay step 1 bit for bit
        order = stream_generator(
            config.seed, f"train/shuffle/epoch{epoch}"
        ).permutation(len(data))
        losses = []
        pending = 0
        last_lr = math.nan
        for bi in range(n_batches):
            sel = order[bi * config.batch_size : (bi + 1) * config.batch_size]
            ids, mask, ate_t, emo_t = collate([data[i] for i in sel])
            rng = (
                stream_generator(
                    config.seed, f"train/dropout/epoch{epoch}/batch{bi}"
                )
                if config.dropout > 0
                else None
            )
            vat_seed = stream_key(
                config.seed, f"train/vat/epoch{epoch}/batch{bi}"
            )
            loss = _batch_loss(
                model, ids, mask, ate_t, emo_t, config, phase, ghl_ate, ghl_aec, rng, vat_seed
            )
            losses.append(float(loss.data))
            group_start = (bi // config.grad_accumulation) * config.grad_accumulation
            group_size = min(config.grad_accumulation, n_batches - group_start)
            grads = ad.backward(ad.mul(loss, 1.0 / group_size), wrt=tensors)
            for p, g in zip(tensors, grads):
                p.grad += g
            pending += 1
            if pending == config.grad_accumulation or bi == n_batches - 1:
                last_lr = lr_at(config, phase, update_idx, total_updates)
                opt.step(last_lr)
                for p in tensors:
                    p.grad[...] = 0.0
                update_idx += 1
                pending = 0
        entry = {
            "phase": phase,
            "epoch": epoch,
            "global_epoch": start_epoch + epoch,
            "mean_loss": float(np.mean(losses)),
            "lr": last_lr,
            "val_ate_f1": None,
            "val_joint_f1": None,
        }
        if on_epoch is not None:
            on_epoch(entry)
        entries.append(entry)
    return entries


def run_training(
    splits: tuple[
        Sequence[AnnotatedDocument], Sequence[AnnotatedDocument], Sequence[AnnotatedDocument]
    ],
    model_fields: dict,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
) -> tuple[EmoGraceModel, list[dict]]:
    """Full schedule over (train, val, test) documents.

    Builds the vocabulary from the training split, runs steps 1..3 (skipping
    zero-epoch steps), scores the validation split after every epoch and
    keeps the checkpoint with the best joint F1 (final parameters when no
    validation is available).
    """
    from .evaluation import evaluate  # late import to avoid a module cycle

    train_docs, val_docs, _ = splits
    if not train_docs:
        raise ValueError("training split is empty")
    vocab = Vocab.from_texts([d.text for d in train_docs])
    mc = build_model_config(model_fields, vocab_size=len(vocab), dropout=config.dropout)
    model = init_model(mc, seed=config.seed, vocab=vocab)
    data = encode_dataset(train_docs, vocab, mc.max_seq_len)
    if not data:
        raise ValueError("no trainable documents after encoding")

    ghl_ate = GhlState(bins=config.ghl_bins, momentum=config.ghl_momentum)
    ghl_aec = GhlState(bins=config.ghl_bins, momentum=config.ghl_momentum)

    best: dict = {"joint_f1": -1.0, "arrays": None, "global_epoch": None}

    def on_epoch(entry: dict) -> None:
        if val_docs:
            report = evaluate(model, val_docs)
            entry["val_ate_f1"] = report.ate.f1
            entry["val_joint_f1"] = report.joint.f1
            if report.joint.f1 > best["joint_f1"]:
                best["joint_f1"] = report.joint.f1
                best["arrays"] = model.params.state_arrays()
                best["global_epoch"] = entry["global_epoch"]

    log: list[dict] = []
    for phase in (1, 2, 3):
        if config.epochs[phase - 1] <= 0:
            continue
        log.extend(
            train_phase(
                model,
                data,
                config,
                phase,
                ghl_ate,
                ghl_aec,
                start_epoch=len(log),
                on_epoch=on_epoch,
            )
        )

    if best["arrays"] is not None:
        model.params.load_arrays(best["arrays"])
    if checkpoint_path is not None:
        save_model(
            checkpoint_path,
            model,
            extra_meta={
                "train_config": train_config_to_dict(config),
                "ghl_ate": ghl_ate.to_meta(),
                "ghl_aec": ghl_aec.to_meta(),
                "best_global_epoch": best["global_epoch"],
            },
            extra_arrays={
                "ghl_ate.ema_counts": ghl_ate.ema_counts,
                "ghl_aec.ema_counts": ghl_aec.ema_counts,
            },
        )
    return model, log


def write_trainlog(path: str | Path, entries: Sequence[dict]) -> None:
    from .ioutil import atomic_write_text

    lines = [json.dumps(e, sort_keys=True) for e in entries]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
