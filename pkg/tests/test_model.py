import numpy as np
import pytest

from emograce.model import (
    UNK_ID,
    ModelConfig,
    Vocab,
    forward_aec,
    forward_ate,
    init_model,
    load_model,
    parameter_count,
    predict,
    save_model,
)
from emograce.nn_core import softmax

TINY = dict(
    vocab_size=50,
    d_model=8,
    n_heads=2,
    total_encoder_layers=2,
    shared_layers=1,
    aec_decoder_layers=1,
    max_seq_len=16,
    dropout_rate=0.0,
)


@pytest.fixture(scope="module")
def tiny_model():
    return init_model(ModelConfig(**TINY), seed=7)


class TestModelConfig:
    def test_shared_exceeding_total_rejected(self):
        with pytest.raises(ValueError, match="shared_layers"):
            ModelConfig(**{**TINY, "shared_layers": 3})

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(**{**TINY, "n_heads": 3})

    def test_dropout_range(self):
        with pytest.raises(ValueError, match="dropout"):
            ModelConfig(**{**TINY, "dropout_rate": 1.0})


class TestInit:
    def test_parameter_count_matches_hand_formula(self, tiny_model):
        # independent arithmetic for d=8, f=32, V=50, P=16, L=2, A=1:
        d = 8
        embeddings = 50 * d + 16 * d + 2 * d
        enc_block = 4 * (d * d + d) + (d * 32 + 32) + (32 * d + d) + 4 * d
        dec_block = enc_block + 4 * (d * d + d) + 2 * d
        heads = (d * 3 + 3) + (d * 6 + 6)
        expected = embeddings + 2 * enc_block + dec_block + heads + 3 * d
        assert expected == 3569
        assert parameter_count(ModelConfig(**TINY)) == expected
        assert tiny_model.params.total_size() == expected

    def test_same_seed_identical_checkpoints(self, tmp_path):
        a = init_model(ModelConfig(**TINY), seed=3, vocab=Vocab(["x"]))
        b = init_model(ModelConfig(**TINY), seed=3, vocab=Vocab(["x"]))
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(pa, a)
        save_model(pb, b)
        assert pa.read_bytes() == pb.read_bytes()

    def test_different_seeds_differ(self):
        a = init_model(ModelConfig(**TINY), seed=3)
        b = init_model(ModelConfig(**TINY), seed=4)
        assert (a.params["tok_emb"].data != b.params["tok_emb"].data).any()


class TestForwardAte:
    def test_shape_and_normalized_rows(self, tiny_model):
        logits = forward_ate(tiny_model, np.array([3, 4, 5, 6]))
        assert logits.shape == (4, 3)
        np.testing.assert_allclose(softmax(logits.data).sum(-1), 1.0, atol=1e-9)

    def test_batch_shape(self, tiny_model):
        logits = forward_ate(tiny_model, np.array([[3, 4], [5, 0]]), np.array([[1, 1], [1, 0]]))
        assert logits.shape == (2, 2, 3)

    def test_too_long_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="max_seq_len"):
            forward_ate(tiny_model, np.arange(17) % 5)

    def test_out_of_vocab_id_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="vocab_size"):
            forward_ate(tiny_model, np.array([1, 50]))

    def test_permutation_equivariance_without_positions(self):
        m = init_model(ModelConfig(**TINY), seed=11)
        m.params["pos_emb"].data[...] = 0.0
        ids = np.array([4, 9, 17, 25])
        base = forward_ate(m, ids).data
        swapped = ids.copy()
        swapped[[1, 3]] = swapped[[3, 1]]
        out = forward_ate(m, swapped).data
        np.testing.assert_allclose(out[1], base[3], atol=1e-12)
        np.testing.assert_allclose(out[3], base[1], atol=1e-12)
        np.testing.assert_allclose(out[0], base[0], atol=1e-12)


class TestForwardAec:
    def test_shape(self, tiny_model):
        dist = np.eye(3)[np.array([2, 0, 1, 2])]
        logits = forward_aec(tiny_model, np.array([3, 4, 5, 6]), None, dist)
        assert logits.shape == (4, 6)

    def test_rows_must_sum_to_one(self, tiny_model):
        bad = np.full((4, 3), 0.5)
        with pytest.raises(ValueError, match="sum to 1"):
            forward_aec(tiny_model, np.array([3, 4, 5, 6]), None, bad)

    def test_zeroed_label_table_ignores_labels(self):
        m = init_model(ModelConfig(**TINY), seed=13)
        m.params["label_emb"].data[...] = 0.0
        ids = np.array([3, 4, 5])
        a = forward_aec(m, ids, None, np.eye(3)[np.array([0, 0, 0])]).data
        b = forward_aec(m, ids, None, np.eye(3)[np.array([2, 2, 2])]).data
        np.testing.assert_array_equal(a, b)

    def test_cascade_label_changes_logits(self, tiny_model):
        ids = np.array([3, 4, 5])
        base = np.eye(3)[np.array([0, 2, 2])]  # B at position 0
        alt = np.eye(3)[np.array([2, 2, 2])]  # O everywhere
        a = forward_aec(tiny_model, ids, None, base).data
        b = forward_aec(tiny_model, ids, None, alt).data
        assert np.abs(a[0] - b[0]).max() > 1e-9


class TestPredict:
    def _model_with_vocab(self):
        vocab = Vocab(["I", "love", "you", "."])
        cfg = ModelConfig(**{**TINY, "vocab_size": len(vocab)})
        return init_model(cfg, seed=5, vocab=vocab)

    def test_empty_text(self):
        assert predict(self._model_with_vocab(), "") == []

    def test_deterministic(self):
        m = self._model_with_vocab()
        assert predict(m, "I love you.") == predict(m, "I love you.")

    def test_spans_never_overlap(self):
        m = self._model_with_vocab()
        rng = np.random.default_rng(17)
        words = ["I", "love", "you", ".", "unknown"]
        for _ in range(40):
            text = " ".join(rng.choice(words, size=rng.integers(1, 8)))
            spans = sorted(predict(m, text), key=lambda s: s.start)
            for a, b in zip(spans, spans[1:]):
                assert a.end <= b.start

    def test_oov_encodes_to_unk(self):
        vocab = Vocab(["I", "love"])
        ids = vocab.encode(["I", "zebra"])
        assert ids[1] == UNK_ID


def test_save_load_roundtrip(tmp_path):
    vocab = Vocab(["a", "b", "c"])
    m = init_model(ModelConfig(**{**TINY, "vocab_size": len(vocab)}), seed=9, vocab=vocab)
    path = tmp_path / "m.ckpt"
    save_model(path, m, extra_meta={"note": 1}, extra_arrays={"s": np.array([1.5])})
    back, meta, state = load_model(path)
    assert meta["note"] == 1
    assert back.config == m.config
    assert back.vocab.itos == vocab.itos
    np.testing.assert_array_equal(state["s"], np.array([1.5]))
    for name, p in m.params.items():
        np.testing.assert_allclose(back.params[name].data, p.data, atol=1e-6)
