"""Tests for the PV-DBOW embedder."""

import numpy as np
import pytest

from cgforge.embedder import (
    EmbedderConfig,
    embed_slice,
    load_embedder,
    pvdbow_loss_and_grads,
    save_embedder,
    train_embedder,
    transfer_init_embedder,
)
from cgforge.errors import ConfigError, DataError, VocabMismatchError
from cgforge.slicer import Origin, Slice
from cgforge.symbolizer import SymbolizationMode, SymbolizationPolicy, build_vocabulary

LOOSE = SymbolizationPolicy(SymbolizationMode.LOOSE, 10)

CORPUS = [
    ["push", "rbp", "mov", "edi", ",", "num", "call", "fun3", "mov", "ebx", ",", "eax"],
    ["push", "rbp", "mov", "qword", "ptr", "[", "rbp", "-", "num", "]", ",", "rdi", "ret"],
    ["mov", "rax", ",", "qword", "ptr", "[", "rip", "+", "num", "]", "call", "rax"],
    ["lea", "rdi", ",", "str5", "call", "fun1", "test", "eax", ",", "eax", "jz", "loc2"],
] * 3


@pytest.fixture
def vocab():
    return build_vocabulary(CORPUS, LOOSE)


@pytest.fixture
def small_cfg():
    return EmbedderConfig(dim=8, negative=3, epochs=3, seed=5)


class TestLossAndGrads:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        vectors = rng.normal(size=(7, 4))
        paragraph = rng.normal(size=4)
        target, negatives = 2, [3, 5, 2, 6]  # one negative equals the target and is ignored

        g = pvdbow_loss_and_grads(paragraph, vectors, target, negatives)
        eps = 1e-6

        num_p = np.zeros_like(paragraph)
        for i in range(paragraph.size):
            up, down = paragraph.copy(), paragraph.copy()
            up[i] += eps
            down[i] -= eps
            num_p[i] = (pvdbow_loss_and_grads(up, vectors, target, negatives).loss
                        - pvdbow_loss_and_grads(down, vectors, target, negatives).loss) / (2 * eps)
        np.testing.assert_allclose(g.paragraph, num_p, rtol=1e-5, atol=1e-8)

        num_v = np.zeros_like(vectors)
        for idx in np.ndindex(vectors.shape):
            up, down = vectors.copy(), vectors.copy()
            up[idx] += eps
            down[idx] -= eps
            num_v[idx] = (pvdbow_loss_and_grads(paragraph, up, target, negatives).loss
                          - pvdbow_loss_and_grads(paragraph, down, target, negatives).loss) / (2 * eps)
        np.testing.assert_allclose(g.tokens, num_v, rtol=1e-5, atol=1e-8)

    def test_negative_equal_to_target_is_masked(self):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(5, 3))
        paragraph = rng.normal(size=3)
        with_self = pvdbow_loss_and_grads(paragraph, vectors, 1, [1, 2])
        without = pvdbow_loss_and_grads(paragraph, vectors, 1, [2])
        assert with_self.loss == pytest.approx(without.loss)


class TestTrainEmbedder:
    def test_shapes_and_pad_row(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        assert m.token_vectors.shape == (vocab.size, 8)
        assert m.token_vectors.dtype == np.float32
        assert not m.token_vectors[0].any()
        assert len(m.loss_history) == 3

    def test_deterministic(self, vocab, small_cfg):
        a = train_embedder(CORPUS, vocab, small_cfg)
        b = train_embedder(CORPUS, vocab, small_cfg)
        assert np.array_equal(a.token_vectors, b.token_vectors)
        assert a.loss_history == b.loss_history

    def test_seed_changes_vectors(self, vocab, small_cfg):
        a = train_embedder(CORPUS, vocab, small_cfg)
        b = train_embedder(CORPUS, vocab, EmbedderConfig(dim=8, negative=3, epochs=3, seed=6))
        assert not np.array_equal(a.token_vectors, b.token_vectors)

    def test_loss_decreases(self, vocab):
        m = train_embedder(CORPUS, vocab, EmbedderConfig(dim=16, negative=3, epochs=30, seed=0))
        assert m.loss_history[-1] < m.loss_history[0]

    def test_zero_epochs_keeps_init(self, vocab, small_cfg):
        first = train_embedder(CORPUS, vocab, small_cfg)
        again = train_embedder(CORPUS, vocab, EmbedderConfig(dim=8, negative=3, epochs=0, seed=9), init=first)
        assert np.array_equal(again.token_vectors, first.token_vectors)

    def test_empty_corpus(self, vocab, small_cfg):
        with pytest.raises(DataError):
            train_embedder([], vocab, small_cfg)

    def test_init_vocab_mismatch(self, vocab, small_cfg):
        other = build_vocabulary([["nop"]], LOOSE)
        first = train_embedder([["nop"]], other, small_cfg)
        with pytest.raises(VocabMismatchError):
            train_embedder(CORPUS, vocab, small_cfg, init=first)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            EmbedderConfig(dim=0)


class TestEmbedSlice:
    def test_padding(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        e = embed_slice(m, ["push", "rbp"], 5)
        assert e.matrix.shape == (5, 8)
        assert e.flat.shape == (40,)
        assert not e.matrix[2:].any()
        assert np.array_equal(e.matrix[0], m.token_vectors[vocab.index("push")])

    def test_unknown_token_uses_unk_row(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        e = embed_slice(m, ["frobnicate"], 1)
        assert np.array_equal(e.matrix[0], m.token_vectors[1])

    def test_callsite_window_centred_on_call(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        tokens = tuple(["push"] * 10 + ["call", "rax"] + ["ret"] * 10)
        s = Slice(Origin.CALLSITE, "b", 0x10, tokens, (0x10,), (len(tokens),), anchor=10)
        e = embed_slice(m, s, 4)
        expected = [vocab.index(t) for t in ("push", "push", "call", "rax")]
        assert np.array_equal(e.matrix, m.token_vectors[expected])

    def test_callee_keeps_head(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        tokens = ("push", "rbp", "ret", "ret")
        s = Slice(Origin.CALLEE, "b", 0x10, tokens, (0x10,), (4,))
        e = embed_slice(m, s, 2)
        assert np.array_equal(e.matrix, m.token_vectors[[vocab.index("push"), vocab.index("rbp")]])

    def test_errors(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        with pytest.raises(ConfigError):
            embed_slice(m, ["push"], 0)
        with pytest.raises(DataError):
            embed_slice(m, [], 4)


class TestPersistence:
    def test_save_is_byte_identical(self, tmp_path, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        save_embedder(m, tmp_path / "a.cgm", manifest_hash="abc")
        save_embedder(m, tmp_path / "b.cgm", manifest_hash="abc")
        assert (tmp_path / "a.cgm").read_bytes() == (tmp_path / "b.cgm").read_bytes()

    def test_load(self, tmp_path, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        save_embedder(m, tmp_path / "e.cgm")
        loaded = load_embedder(tmp_path / "e.cgm", expected_vocab_hash=vocab.digest())
        assert np.array_equal(loaded.token_vectors, m.token_vectors)
        assert loaded.vocab.tokens == vocab.tokens
        assert loaded.config == small_cfg

    def test_load_vocab_mismatch(self, tmp_path, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        save_embedder(m, tmp_path / "e.cgm")
        with pytest.raises(VocabMismatchError):
            load_embedder(tmp_path / "e.cgm", expected_vocab_hash="0" * 16)


class TestTransferInit:
    def test_copies_vectors(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        t = transfer_init_embedder(m)
        assert np.array_equal(t.token_vectors, m.token_vectors)
        t.token_vectors[2] += 1.0
        assert not np.array_equal(t.token_vectors, m.token_vectors)

    def test_vocab_mismatch(self, vocab, small_cfg):
        m = train_embedder(CORPUS, vocab, small_cfg)
        with pytest.raises(VocabMismatchError):
            transfer_init_embedder(m, build_vocabulary([["nop"]], LOOSE))
