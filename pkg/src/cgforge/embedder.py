"""
PV-DBOW token embeddings.

Each symbolized slice is a paragraph. Its paragraph vector is trained to
predict the slice's tokens against negative samples drawn from the
unigram^0.75 distribution; the per-token output vectors become the token
embeddings E that slices are embedded with.

Two departures from the usual doc2vec defaults, both configurable:
high-frequency tokens are not downsampled and min_count is 0, so rare
tokens (often the semantically decisive ones in assembly) keep trained
vectors.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import read_container, write_container
from .errors import ConfigError, DataError, VocabMismatchError
from .slicer import Origin, Slice
from .symbolizer import Vocabulary

log = logging.getLogger(__name__)

EMBEDDER_FORMAT = "cgforge-embedder"
EMBEDDER_VERSION = 1

PAD_INDEX = 0

_DOWNSAMPLE_THRESHOLD = 1e-3


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 100
    negative: int = 5
    epochs: int = 10
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    min_count: int = 0
    downsample: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"embedding dimension must be >= 1, got {self.dim}")
        if self.negative < 1:
            raise ConfigError(f"negative samples must be >= 1, got {self.negative}")
        if self.epochs < 0 or self.min_count < 0:
            raise ConfigError("epochs and min_count must be non-negative")


@dataclass
class EmbedderModel:
    vocab: Vocabulary
    token_vectors: np.ndarray  # V x k
    config: EmbedderConfig
    paragraph_vectors: np.ndarray | None = None  # P x k, training only
    loss_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.token_vectors.shape[1]


@dataclass(frozen=True)
class EmbeddedSlice:
    """A slice as a T x k matrix; `flat` is its row-major flattening."""
    matrix: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.matrix.reshape(-1)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


@dataclass
class PvDbowGrads:
    loss: float
    paragraph: np.ndarray  # k
    tokens: np.ndarray  # V x k


def _log_sigmoid_terms(pos: np.ndarray, neg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # -log sigma(pos) - sum(mask * log sigma(-neg))
    return np.logaddexp(0.0, -pos) + (np.logaddexp(0.0, neg) * mask).sum(axis=-1)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _example_terms(
    paragraph: np.ndarray,
    vectors: np.ndarray,
    targets: np.ndarray,
    negatives: np.ndarray,
):
    """
    Scores and output-side coefficients for a batch of targets sharing one
    paragraph vector. Negatives equal to their target are masked out.
    """
    mask = (negatives != targets[:, None]).astype(vectors.dtype)
    pos = vectors[targets] @ paragraph
    neg = np.einsum("lkd,d->lk", vectors[negatives], paragraph)
    loss = _log_sigmoid_terms(pos, neg, mask)
    g_pos = _sigmoid(pos) - 1.0
    g_neg = _sigmoid(neg) * mask
    return loss, g_pos, g_neg


def pvdbow_loss_and_grads(
    paragraph: np.ndarray,
    vectors: np.ndarray,
    target: int,
    negatives: Sequence[int],
) -> PvDbowGrads:
    """
    Negative-sampling loss for one (paragraph, target) example and its
    gradients with respect to the paragraph vector and the token table.
    """
    targets = np.array([target])
    negs = np.array([list(negatives)])
    loss, g_pos, g_neg = _example_terms(paragraph, vectors, targets, negs)

    d_paragraph = g_pos[0] * vectors[target] + g_neg[0] @ vectors[negs[0]]
    d_tokens = np.zeros_like(vectors)
    d_tokens[target] += g_pos[0] * paragraph
    np.add.at(d_tokens, negs[0], g_neg[0][:, None] * paragraph[None, :])
    return PvDbowGrads(loss=float(loss[0]), paragraph=d_paragraph, tokens=d_tokens)


def _noise_distribution(counts: np.ndarray) -> np.ndarray:
    weights = counts.astype(np.float64) ** 0.75
    weights[PAD_INDEX] = 0.0
    total = weights.sum()
    if total == 0:
        raise DataError("corpus has no tokens to sample negatives from")
    return np.cumsum(weights / total)


def _init_vectors(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    vectors = ((rng.random((rows, dim)) - 0.5) / dim).astype(np.float32)
    return vectors


def _keep_probabilities(counts: np.ndarray) -> np.ndarray:
    freq = counts / max(counts.sum(), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = (np.sqrt(freq / _DOWNSAMPLE_THRESHOLD) + 1) * _DOWNSAMPLE_THRESHOLD / freq
    return np.nan_to_num(np.minimum(keep, 1.0), nan=1.0)


def _as_tokens(item: Slice | Sequence[str]) -> Sequence[str]:
    return item.tokens if isinstance(item, Slice) else item


def train_embedder(
    corpus: Sequence[Slice | Sequence[str]],
    vocab: Vocabulary,
    cfg: EmbedderConfig,
    init: EmbedderModel | None = None,
) -> EmbedderModel:
    """
    Train PV-DBOW over `corpus`, one paragraph per token sequence.

    With `init`, training continues from its token vectors (the vocabulary
    must match); paragraph vectors are always fresh. Learning rate decays
    linearly per epoch from `learning_rate` to `min_learning_rate`.

    Raises:
        DataError: on an empty corpus
        VocabMismatchError: if `init` was built against another vocabulary
    """
    docs = [np.array(vocab.indices(_as_tokens(item)), dtype=np.int64) for item in corpus]
    docs = [d[d != PAD_INDEX] for d in docs]
    if not docs or not any(len(d) for d in docs):
        raise DataError("cannot train an embedder on an empty corpus")

    rng = np.random.default_rng(cfg.seed)

    if init is not None:
        if init.vocab.digest() != vocab.digest():
            raise VocabMismatchError(
                f"initial embedder vocabulary {init.vocab.digest()} != {vocab.digest()}"
            )
        if init.dim != cfg.dim:
            raise ConfigError(f"initial embedder has dim {init.dim}, config asks for {cfg.dim}")
        vectors = init.token_vectors.astype(np.float32, copy=True)
    else:
        vectors = _init_vectors(rng, vocab.size, cfg.dim)
    vectors[PAD_INDEX] = 0.0
    paragraphs = _init_vectors(rng, len(docs), cfg.dim)

    counts = np.bincount(np.concatenate(docs), minlength=vocab.size)
    cum_noise = _noise_distribution(counts)
    trainable = counts >= cfg.min_count
    keep_prob = _keep_probabilities(counts) if cfg.downsample else None

    history: list[float] = []
    for epoch in range(cfg.epochs):
        frac = epoch / cfg.epochs
        alpha = np.float32(cfg.learning_rate - (cfg.learning_rate - cfg.min_learning_rate) * frac)
        total, n = 0.0, 0

        for doc_id in rng.permutation(len(docs)):
            targets = docs[doc_id]
            targets = targets[trainable[targets]]
            if keep_prob is not None and len(targets):
                targets = targets[rng.random(len(targets)) < keep_prob[targets]]
            if not len(targets):
                continue

            negs = np.searchsorted(cum_noise, rng.random((len(targets), cfg.negative)), side="right")
            negs = np.minimum(negs, vocab.size - 1)

            p = paragraphs[doc_id]
            loss, g_pos, g_neg = _example_terms(p, vectors, targets, negs)

            d_p = g_pos @ vectors[targets] + np.einsum("lk,lkd->d", g_neg, vectors[negs])
            np.add.at(vectors, targets, (-alpha * g_pos)[:, None] * p[None, :])
            np.add.at(vectors, negs.reshape(-1), (-alpha * g_neg.reshape(-1))[:, None] * p[None, :])
            paragraphs[doc_id] = p - alpha * d_p
            vectors[PAD_INDEX] = 0.0

            total += float(loss.sum())
            n += len(targets)

        mean = total / max(n, 1)
        history.append(mean)
        log.info("embedder epoch", extra={"epoch": epoch, "mean_loss": mean, "alpha": float(alpha)})

    prior = list(init.loss_history) if init is not None else []
    return EmbedderModel(
        vocab=vocab,
        token_vectors=vectors,
        config=cfg,
        paragraph_vectors=paragraphs,
        loss_history=prior + history,
    )


def _window(s: Slice | Sequence[str], length: int) -> Sequence[str]:
    tokens = _as_tokens(s)
    if len(tokens) <= length:
        return tokens
    if isinstance(s, Slice) and s.origin is Origin.CALLSITE:
        start = min(max(s.anchor - length // 2, 0), len(tokens) - length)
        return tokens[start:start + length]
    return tokens[:length]


def embed_slice(m: EmbedderModel, s: Slice | Sequence[str], length: int) -> EmbeddedSlice:
    """
    Look up token vectors for `s`, padded with PAD rows or truncated to
    `length` rows. Callsite slices keep a window centred on the call;
    everything else keeps its head.

    Raises:
        ConfigError: if `length` < 1
        DataError: if the slice is empty
    """
    if length < 1:
        raise ConfigError(f"slice length must be >= 1, got {length}")
    tokens = _window(s, length)
    if not tokens:
        raise DataError("cannot embed an empty slice")

    idx = np.zeros(length, dtype=np.int64)
    idx[:len(tokens)] = m.vocab.indices(tokens)
    return EmbeddedSlice(matrix=m.token_vectors[idx])


def transfer_init_embedder(pretrained: EmbedderModel, vocab: Vocabulary | None = None) -> EmbedderModel:
    """
    Copy of `pretrained` ready for continued training on a new corpus.

    Raises:
        VocabMismatchError: if `vocab` differs from the pretrained vocabulary
    """
    if vocab is not None and vocab.digest() != pretrained.vocab.digest():
        raise VocabMismatchError(
            f"vocabulary {vocab.digest()} does not match pretrained {pretrained.vocab.digest()}"
        )
    return EmbedderModel(
        vocab=pretrained.vocab,
        token_vectors=pretrained.token_vectors.copy(),
        config=pretrained.config,
        loss_history=list(pretrained.loss_history),
    )


def save_embedder(m: EmbedderModel, path: Path, manifest_hash: str | None = None):
    write_container(
        path,
        EMBEDDER_FORMAT,
        EMBEDDER_VERSION,
        meta={
            "config": asdict(m.config),
            "vocab": m.vocab.to_json(),
            "vocab_hash": m.vocab.digest(),
            "loss_history": m.loss_history,
            "manifest": manifest_hash,
        },
        tensors={"token_vectors": m.token_vectors},
    )


def load_embedder(path: Path, expected_vocab_hash: str | None = None) -> EmbedderModel:
    """
    Raises:
        DataError: if the container is unreadable or malformed
        VocabMismatchError: if `expected_vocab_hash` is given and differs
    """
    meta, tensors = read_container(path, EMBEDDER_FORMAT, EMBEDDER_VERSION)
    vocab = Vocabulary.from_json(meta["vocab"])
    if vocab.digest() != meta["vocab_hash"]:
        raise DataError(f"{path}: stored vocabulary does not match its recorded hash")
    if expected_vocab_hash is not None and expected_vocab_hash != meta["vocab_hash"]:
        raise VocabMismatchError(
            f"{path}: embedder vocabulary {meta['vocab_hash']} != expected {expected_vocab_hash}"
        )
    vectors = tensors["token_vectors"]
    if vectors.shape[0] != vocab.size:
        raise DataError(f"{path}: {vectors.shape[0]} token vectors for a vocabulary of {vocab.size}")
    return EmbedderModel(
        vocab=vocab,
        token_vectors=vectors,
        config=EmbedderConfig(**meta["config"]),
        loss_history=list(meta.get("loss_history", [])),
    )
