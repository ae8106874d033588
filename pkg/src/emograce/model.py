"""Two-branch cascaded sequence labeler.

A shared transformer encoder feeds (a) an aspect-extraction branch of extra
encoder blocks with a 3-way B/I/O head and (b) an emotion branch of decoder
blocks that consume the shared hidden states plus embedded aspect labels and
cross-attend over the extraction branch's final states, ending in a 6-way
emotion head. Feed-forward widths are fixed at 4 * d_model.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Span
from .nn_core import ParamStore, read_checkpoint, seeded_init, write_checkpoint
from .rng import SeedStream
from .textseg import ATE_TAGS, EMO_TAGS, TaggedSequence, decode_spans, tokenize

LN_EPS = 1e-12
NEG_BIG = -1e9

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    total_encoder_layers: int = 4
    shared_layers: int = 2
    aec_decoder_layers: int = 2
    max_seq_len: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover at least pad and unk ids")
        if not (1 <= self.shared_layers <= self.total_encoder_layers):
            raise ValueError(
                f"shared_layers must lie in [1, total_encoder_layers], got "
                f"{self.shared_layers} with {self.total_encoder_layers} layers"
            )
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.aec_decoder_layers < 1:
            raise ValueError("aec_decoder_layers must be >= 1")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter total for a config.

    With d = d_model, f = 4d, V = vocab_size, P = max_seq_len, L total encoder
    blocks and A decoder blocks:

        embeddings      V*d + P*d + 2d
        encoder block   4(d^2 + d) + (d*f + f) + (f*d + d) + 4d  = 12d^2 + 13d
        decoder block   encoder block + 4(d^2 + d) + 2d          = 16d^2 + 19d
        heads           (d*3 + 3) + (d*6 + 6)
        label table     3d
    """
    d = config.d_model
    enc_block = 12 * d * d + 13 * d
    dec_block = 16 * d * d + 19 * d
    return (
        config.vocab_size * d
        + config.max_seq_len * d
        + 2 * d
        + config.total_encoder_layers * enc_block
        + config.aec_decoder_layers * dec_block
        + (d * 3 + 3)
        + (d * 6 + 6)
        + 3 * d
    )


class Vocab:
    """Token-to-id map with reserved pad/unk ids; OOV tokens encode to unk."""

    def __init__(self, tokens: Sequence[str]):
        extra = sorted(set(tokens) - {PAD_TOKEN, UNK_TOKEN})
        self._itos = [PAD_TOKEN, UNK_TOKEN] + extra
        self._stoi = {tok: i for i, tok in enumerate(self._itos)}

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocab":
        return cls([tok.text for text in texts for tok in tokenize(text)])

    @classmethod
    def from_itos(cls, itos: Sequence[str]) -> "Vocab":
        if list(itos[:2]) != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with the pad and unk tokens")
        vocab = cls([])
        vocab._itos = list(itos)
        vocab._stoi = {tok: i for i, tok in enumerate(vocab._itos)}
        return vocab

    def __len__(self) -> int:
        return len(self._itos)

    def encode(self, token_texts: Sequence[str]) -> np.ndarray:
        return np.array(
            [self._stoi.get(t, UNK_ID) for t in token_texts], dtype=np.int64
        )

    @property
    def itos(self) -> list[str]:
        return list(self._itos)


class EmoGraceModel:
    def __init__(self, config: ModelConfig, params: ParamStore, vocab: Vocab | None = None):
        self.config = config
        self.params = params
        self.vocab = vocab


def init_model(config: ModelConfig, seed: int, vocab: Vocab | None = None) -> EmoGraceModel:
    """Deterministically initialized model; weight draws are keyed by
    parameter name so layouts replay exactly for a given seed."""
    stream = SeedStream(seed, "model_init")
    params = ParamStore()
    d = config.d_model
    f = 4 * d

    def w(name: str, shape: tuple[int, ...]) -> None:
        params.add(name, seeded_init(shape, "uniform-scaled", stream.child(name).key()))

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params.add(name, seeded_init(shape, "zeros", 0))

    def ln(prefix: str) -> None:
        params.add(f"{prefix}.gain", seeded_init((d,), "ones", 0))
        params.add(f"{prefix}.bias", seeded_init((d,), "zeros", 0))

    def attn(prefix: str) -> None:
        for nm in ("q", "k", "v", "o"):
            w(f"{prefix}.w{nm}", (d, d))
            zeros(f"{prefix}.b{nm}", (d,))

    def ff(prefix: str) -> None:
        w(f"{prefix}.w1", (d, f))
        zeros(f"{prefix}.b1", (f,))
        w(f"{prefix}.w2", (f, d))
        zeros(f"{prefix}.b2", (d,))

    w("tok_emb", (config.vocab_size, d))
    w("pos_emb", (config.max_seq_len, d))
    ln("emb_ln")
    for i in range(config.total_encoder_layers):
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln1")
        ff(f"enc.{i}.ff")
        ln(f"enc.{i}.ln2")
    w("ate_head.w", (d, len(ATE_TAGS)))
    zeros("ate_head.b", (len(ATE_TAGS),))
    w("label_emb", (len(ATE_TAGS), d))
    for j in range(config.aec_decoder_layers):
        attn(f"aec.{j}.self_attn")
        ln(f"aec.{j}.ln1")
        attn(f"aec.{j}.cross_attn")
        ln(f"aec.{j}.ln2")
        ff(f"aec.{j}.ff")
        ln(f"aec.{j}.ln3")
    w("aec_head.w", (d, len(EMO_TAGS)))
    zeros("aec_head.b", (len(EMO_TAGS),))

    assert params.total_size() == parameter_count(config)
    return EmoGraceModel(config, params, vocab)


def is_aec_param(name: str) -> bool:
    """Parameters owned by the emotion branch (untouched in phases 1-2)."""
    return name == "label_emb" or name.startswith("aec")


def encoder_layer_index(name: str) -> int | None:
    """Global encoder block index for bottom-k freezing, None for non-block
    parameters."""
    if name.startswith("enc."):
        return int(name.split(".")[1])
    return None


def _attention(
    params: ParamStore,
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    n_heads: int,
    mask_bias: np.ndarray,
) -> Tensor:
    b, t, d = q_in.shape
    s = kv_in.shape[1]
    dh = d // n_heads
    q = q_in @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = kv_in @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = kv_in @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    qh = ad.transpose(ad.reshape(q, (b, t, n_heads, dh)), (0, 2, 1, 3))
    kh = ad.transpose(ad.reshape(k, (b, s, n_heads, dh)), (0, 2, 3, 1))
    vh = ad.transpose(ad.reshape(v, (b, s, n_heads, dh)), (0, 2, 1, 3))
    scores = ad.mul(qh @ kh, 1.0 / np.sqrt(dh)) + mask_bias
    ctx = ad.softmax(scores, axis=-1) @ vh
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return merged @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def _encoder_block(
    params: ParamStore,
    prefix: str,
    x: Tensor,
    n_heads: int,
    mask_bias: np.ndarray,
    rate: float,
    rng: np.random.Generator | None,
) -> Tensor:
    a = _attention(params, f"{prefix}.attn", x, x, n_heads, mask_bias)
    x = ad.layer_norm(
        x + ad.dropout(a, rate, rng),
        params[f"{prefix}.ln1.gain"],
        params[f"{prefix}.ln1.bias"],
        LN_EPS,
    )
    hidden = ad.gelu(x @ params[f"{prefix}.ff.w1"] + params[f"{prefix}.ff.b1"])
    fout = hidden @ params[f"{prefix}.ff.w2"] + params[f"{prefix}.ff.b2"]
    return ad.layer_norm(
        x + ad.dropout(fout, rate, rng),
        params[f"{prefix}.ln2.gain"],
        params[f"{prefix}.ln2.bias"],
        LN_EPS,
    )


def _decoder_block(
    params: ParamStore,
    prefix: str,
    x: Tensor,
    memory: Tensor,
    n_heads: int,
    mask_bias: np.ndarray,
    rate: float,
    rng: np.random.Generator | None,
) -> Tensor:
    a = _attention(params, f"{prefix}.self_attn", x, x, n_heads, mask_bias)
    x = ad.layer_norm(
        x + ad.dropout(a, rate, rng),
        params[f"{prefix}.ln1.gain"],
        params[f"{prefix}.ln1.bias"],
        LN_EPS,
    )
    c = _attention(params, f"{prefix}.cross_attn", x, memory, n_heads, mask_bias)
    x = ad.layer_norm(
        x + ad.dropout(c, rate, rng),
        params[f"{prefix}.ln2.gain"],
        params[f"{prefix}.ln2.bias"],
        LN_EPS,
    )
    hidden = ad.gelu(x @ params[f"{prefix}.ff.w1"] + params[f"{prefix}.ff.b1"])
    fout = hidden @ params[f"{prefix}.ff.w2"] + params[f"{prefix}.ff.b2"]
    return ad.layer_norm(
        x + ad.dropout(fout, rate, rng),
        params[f"{prefix}.ln3.gain"],
        params[f"{prefix}.ln3.bias"],
        LN_EPS,
    )


def _prepare(
    model: EmoGraceModel, token_ids, mask
) -> tuple[np.ndarray, np.ndarray, bool]:
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError("token_ids must be a 1-D or 2-D integer array")
    if ids.shape[1] == 0:
        raise ValueError("empty sequence")
    if ids.shape[1] > model.config.max_seq_len:
        raise ValueError(
            f"sequence length {ids.shape[1]} exceeds max_seq_len "
            f"{model.config.max_seq_len}"
        )
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ValueError("token id outside [0, vocab_size)")
    if mask is None:
        m = np.ones(ids.shape, dtype=np.float64)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if single and m.ndim == 1:
            m = m[None, :]
        if m.shape != ids.shape:
            raise ValueError("mask shape must match token_ids")
    return ids, m, single


def _encode_shared(
    model: EmoGraceModel,
    ids: np.ndarray,
    mask_bias: np.ndarray,
    dropout: float,
    rng: np.random.Generator | None,
    embed_noise: Tensor | np.ndarray | None,
) -> Tensor:
    p = model.params
    tok = ad.embedding(p["tok_emb"], ids)
    pos = ad.embedding(p["pos_emb"], np.arange(ids.shape[1]))
    x = tok + pos
    if embed_noise is not None:
        x = x + embed_noise
    x = ad.layer_norm(x, p["emb_ln.gain"], p["emb_ln.bias"], LN_EPS)
    x = ad.dropout(x, dropout, rng)
    for i in range(model.config.shared_layers):
        x = _encoder_block(p, f"enc.{i}", x, model.config.n_heads, mask_bias, dropout, rng)
    return x


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    return ((1.0 - mask) * NEG_BIG)[:, None, None, :]


def forward_ate(
    model: EmoGraceModel,
    token_ids,
    mask=None,
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    embed_noise=None,
    return_hidden: bool = False,
):
    """Per-position 3-way aspect-tag logits; padded positions are produced
    but meant to be excluded from losses and metrics via the mask."""
    ids, m, single = _prepare(model, token_ids, mask)
    bias = _mask_bias(m)
    shared = _encode_shared(model, ids, bias, dropout, rng, embed_noise)
    h = shared
    cfg = model.config
    for i in range(cfg.shared_layers, cfg.total_encoder_layers):
        h = _encoder_block(model.params, f"enc.{i}", h, cfg.n_heads, bias, dropout, rng)
    logits = h @ model.params["ate_head.w"] + model.params["ate_head.b"]
    if single and not return_hidden:
        return ad.reshape(logits, logits.shape[1:])
    if return_hidden:
        return logits, (shared, h)
    return logits


def forward_aec(
    model: EmoGraceModel,
    token_ids,
    mask,
    ate_label_dist,
    *,
    hidden: tuple[Tensor, Tensor] | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    embed_noise=None,
):
    """Per-position 6-way emotion logits from the cascaded decoder branch.

    `ate_label_dist` rows (soft distributions or one-hots over B/I/O) must sum
    to 1; they are embedded through the label table and added to the shared
    hidden states. `hidden` may carry (shared, extraction-final) tensors from
    a prior forward_ate call to keep phase-3 graphs shared.
    """
    ids, m, single = _prepare(model, token_ids, mask)
    dist = ate_label_dist if isinstance(ate_label_dist, Tensor) else ad.constant(ate_label_dist)
    if dist.data.ndim == 2:
        dist = ad.reshape(dist, (1,) + dist.data.shape)
    if dist.data.shape[:2] != ids.shape or dist.data.shape[2] != len(ATE_TAGS):
        raise ValueError("ate_label_dist must have shape (batch, seq, 3)")
    if np.max(np.abs(dist.data.sum(axis=-1) - 1.0)) > 1e-6:
        raise ValueError("ate_label_dist rows must sum to 1")
    bias = _mask_bias(m)
    if hidden is None:
        shared = _encode_shared(model, ids, bias, dropout, rng, embed_noise)
        h = shared
        cfg = model.config
        for i in range(cfg.shared_layers, cfg.total_encoder_layers):
            h = _encoder_block(model.params, f"enc.{i}", h, cfg.n_heads, bias, dropout, rng)
    else:
        shared, h = hidden
    x = shared + dist @ model.params["label_emb"]
    for j in range(model.config.aec_decoder_layers):
        x = _decoder_block(
            model.params, f"aec.{j}", x, h, model.config.n_heads, bias, dropout, rng
        )
    logits = x @ model.params["aec_head.w"] + model.params["aec_head.b"]
    if single:
        return ad.reshape(logits, logits.shape[1:])
    return logits


def predict(model: EmoGraceModel, text: str) -> list[Span]:
    """Spans with emotions for raw text: extraction argmax feeds the emotion
    branch as hard one-hots, then tags decode back to character offsets.
    Texts longer than max_seq_len are labeled on their leading tokens only.
    """
    if model.vocab is None:
        raise ValueError("model has no vocabulary attached")
    tokens = tokenize(text)
    if not tokens:
        return []
    tokens = tokens[: model.config.max_seq_len]
    ids = model.vocab.encode([t.text for t in tokens])
    ate_logits = forward_ate(model, ids)
    ate_ids = np.argmax(ate_logits.data, axis=-1)
    onehot = np.eye(len(ATE_TAGS))[ate_ids]
    emo_logits = forward_aec(model, ids, None, onehot)
    emo_ids = np.argmax(emo_logits.data, axis=-1)
    tagged = TaggedSequence(
        "",
        tokens,
        [ATE_TAGS[i] for i in ate_ids],
        [EMO_TAGS[i] for i in emo_ids],
    )
    return decode_spans(tagged)


def save_model(
    path: str | Path,
    model: EmoGraceModel,
    extra_meta: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Checkpoint: float32 weights, config and vocabulary in the metadata.
    `extra_arrays` (training state) are stored at their own dtype."""
    meta = {
        "model_config": asdict(model.config),
        "vocab": model.vocab.itos if model.vocab is not None else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays: dict[str, np.ndarray] = {
        f"param/{name}": p.data.astype(np.float32) for name, p in model.params.items()
    }
    if extra_arrays:
        for name, arr in extra_arrays.items():
            arrays[f"state/{name}"] = arr
    write_checkpoint(path, meta, arrays)


def load_model(path: str | Path) -> tuple[EmoGraceModel, dict, dict[str, np.ndarray]]:
    meta, arrays = read_checkpoint(path)
    config = ModelConfig(**meta["model_config"])
    vocab = Vocab.from_itos(meta["vocab"]) if meta.get("vocab") is not None else None
    model = init_model(config, seed=0, vocab=vocab)
    model.params.load_arrays(
        {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    )
    state = {k[len("state/"):]: v for k, v in arrays.items() if k.startswith("state/")}
    return model, meta, state
