"""
Siamese callsite/callee matcher.

Two feature extractors with identical architecture and independent weights
map an embedded callsite slice and an embedded callee slice into R^f. A
classifier over their concatenation emits a difference score d in (0, 1);
the pair matches iff d < threshold. Training minimises the contrastive loss

    L = 1/(2N) * sum_i [ y_i * d_i^2 + (1 - y_i) * max(1 - d_i, 0)^2 ]

with RMSprop. All gradients are computed analytically.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from .artifacts import read_container, write_container
from .embedder import EmbeddedSlice
from .errors import ArchMismatchError, ConfigError, DataError, VocabMismatchError
from .layers import MLP, Params

log = logging.getLogger(__name__)

MATCHER_FORMAT = "cgforge-matcher"
MATCHER_VERSION = 1

# Rows per eval-mode matmul. Every inference block has this shape, so a
# pair's score does not depend on how many pairs were scored with it.
INFERENCE_BLOCK = 32

PHI = "phi"
PHI_PRIME = "phi_prime"
SIGMA = "sigma"


class Decision(Enum):
    MATCH = "match"
    NO_MATCH = "no_match"


class Branch(Enum):
    CALLSITE = "callsite"
    CALLEE = "callee"


@dataclass(frozen=True)
class ArchConfig:
    slice_len: int = 128
    embed_dim: int = 100
    hidden_sizes: tuple[int, ...] = (512, 512, 512)
    feature_dim: int = 512
    classifier_sizes: tuple[int, ...] = (512, 512)
    dropout: float = 0.2
    batchnorm: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        object.__setattr__(self, "classifier_sizes", tuple(self.classifier_sizes))
        sizes = (self.slice_len, self.embed_dim, self.feature_dim, *self.hidden_sizes, *self.classifier_sizes)
        if min(sizes) < 1:
            raise ConfigError(f"architecture sizes must be >= 1: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def input_dim(self) -> int:
        return self.slice_len * self.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        d["classifier_sizes"] = list(self.classifier_sizes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    epochs: int = 20
    learning_rate: float = 0.001
    rho: float = 0.99
    epsilon: float = 1e-8
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("epochs and learning rate must be non-negative")


@dataclass(frozen=True)
class Score:
    """Difference score; lower means more likely to match."""
    d: float

    def decide(self, threshold: float) -> Decision:
        return Decision.MATCH if self.d < threshold else Decision.NO_MATCH

    def matches(self, threshold: float) -> bool:
        return self.d < threshold


@dataclass
class PairRecord:
    callsite_slice: EmbeddedSlice
    callee_slice: EmbeddedSlice
    y: int
    provenance: tuple[str, int, int] = ("", 0, 0)  # (binary_id, callsite addr, callee addr)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int


class FeatureExtractor(Protocol):
    """What the Siamese branches need from a feature network."""
    n_in: int
    n_out: int

    def init(self, rng: np.random.Generator, dtype) -> Params: ...

    def trainable_names(self) -> list[str]: ...

    def forward(self, params: Params, x: np.ndarray, train: bool, rng: np.random.Generator | None = None): ...

    def backward(self, params: Params, caches: list, dout: np.ndarray) -> tuple[np.ndarray, Params]: ...

    def updated_buffers(self, params: Params, caches: list) -> Params: ...


@lru_cache(maxsize=16)
def build_networks(arch: ArchConfig) -> tuple[MLP, MLP, MLP]:
    """(phi, phi_prime, sigma) for `arch`."""
    def extractor(name) -> FeatureExtractor:
        return MLP(name, arch.input_dim, arch.hidden_sizes, arch.feature_dim,
                   dropout=arch.dropout, batchnorm=arch.batchnorm, output_relu=True)

    sigma = MLP(SIGMA, 2 * arch.feature_dim, arch.classifier_sizes, 1,
                dropout=arch.dropout, batchnorm=arch.batchnorm)
    return extractor(PHI), extractor(PHI_PRIME), sigma


@dataclass
class SiameseModel:
    arch: ArchConfig
    params: Params  # trainable tensors and BatchNorm running statistics
    seed: int = 0
    opt_state: Params = field(default_factory=dict)
    epochs_trained: int = 0
    vocab_hash: str | None = None

    @property
    def dtype(self):
        return np.dtype(self.arch.dtype)

    def group(self, prefix: str) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    @property
    def phi_params(self) -> Params:
        return self.group(PHI)

    @property
    def phi_prime_params(self) -> Params:
        return self.group(PHI_PRIME)

    @property
    def sigma_params(self) -> Params:
        return self.group(SIGMA)

    def trainable_names(self) -> list[str]:
        names: list[str] = []
        for net in build_networks(self.arch):
            names.extend(net.trainable_names())
        return names

    def copy(self) -> "SiameseModel":
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            opt_state={k: v.copy() for k, v in self.opt_state.items()},
        )


def init_model(arch: ArchConfig, seed: int = 0, vocab_hash: str | None = None) -> SiameseModel:
    """Freshly initialized model; each branch draws from its own stream of `seed`."""
    phi, phi_prime, sigma = build_networks(arch)
    dtype = np.dtype(arch.dtype)
    params: Params = {}
    for i, net in enumerate((phi, phi_prime, sigma)):
        params.update(net.init(np.random.default_rng([seed, i]), dtype))
    return SiameseModel(arch=arch, params=params, seed=seed, vocab_hash=vocab_hash)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_inputs(m: SiameseModel, q: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.atleast_2d(np.asarray(q, dtype=m.dtype))
    a = np.atleast_2d(np.asarray(a, dtype=m.dtype))
    width = m.arch.input_dim
    if q.shape[1] != width or a.shape[1] != width:
        raise ArchMismatchError(
            f"inputs of width {q.shape[1]}/{a.shape[1]} do not match model input_dim {width}"
        )
    if q.shape[0] != a.shape[0]:
        raise DataError(f"{q.shape[0]} callsite rows but {a.shape[0]} callee rows")
    return q, a


def _forward(m: SiameseModel, q: np.ndarray, a: np.ndarray, train: bool, rng: np.random.Generator | None):
    phi, phi_prime, sigma = build_networks(m.arch)
    fq, cq = phi.forward(m.params, q, train, rng)
    fa, ca = phi_prime.forward(m.params, a, train, rng)
    z, cs = sigma.forward(m.params, np.concatenate([fq, fa], axis=1), train, rng)
    d = _sigmoid(z[:, 0])
    return d, (cq, ca, cs)


def _backward(m: SiameseModel, d: np.ndarray, caches, dd: np.ndarray) -> tuple[np.ndarray, np.ndarray, Params]:
    phi, phi_prime, sigma = build_networks(m.arch)
    cq, ca, cs = caches
    dz = (dd * d * (1.0 - d))[:, None]
    dh, grads = sigma.backward(m.params, cs, dz)
    f = m.arch.feature_dim
    dq, g_phi = phi.backward(m.params, cq, dh[:, :f])
    da, g_phi_prime = phi_prime.backward(m.params, ca, dh[:, f:])
    grads.update(g_phi)
    grads.update(g_phi_prime)
    return dq, da, grads


def _updated_buffers(m: SiameseModel, caches) -> Params:
    phi, phi_prime, sigma = build_networks(m.arch)
    cq, ca, cs = caches
    out = phi.updated_buffers(m.params, cq)
    out.update(phi_prime.updated_buffers(m.params, ca))
    out.update(sigma.updated_buffers(m.params, cs))
    return out


def _loss_terms(d: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Contrastive loss and dL/dd."""
    n = len(d)
    hinge = np.maximum(1.0 - d, 0.0)
    loss = float((y * d ** 2 + (1 - y) * hinge ** 2).sum() / (2 * n))
    dd = (y * d - (1 - y) * hinge) / n
    return loss, dd


def contrastive_loss(batch: Sequence[tuple[Score | float, int]]) -> float:
    """
    Examples:
        >>> contrastive_loss([(0.5, 1)])
        0.125
    """
    if not batch:
        raise DataError("contrastive loss of an empty batch")
    d = np.array([s.d if isinstance(s, Score) else s for s, _ in batch], dtype=np.float64)
    y = np.array([label for _, label in batch], dtype=np.float64)
    return _loss_terms(d, y)[0]


def parameter_gradients(
    m: SiameseModel,
    q: np.ndarray,
    a: np.ndarray,
    y: np.ndarray,
    train: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[float, Params]:
    """Contrastive loss of a batch and its gradient for every trainable tensor."""
    q, a = _check_inputs(m, q, a)
    y = np.asarray(y, dtype=m.dtype)
    d, caches = _forward(m, q, a, train, rng)
    loss, dd = _loss_terms(d, y)
    _, _, grads = _backward(m, d, caches, dd)
    return loss, grads


def _stack(rows: Sequence[EmbeddedSlice], dtype) -> np.ndarray:
    return np.stack([r.flat for r in rows]).astype(dtype, copy=False)


def train_epoch(m: SiameseModel, pairs: Sequence[PairRecord], cfg: TrainConfig) -> tuple[SiameseModel, EpochStats]:
    """
    One pass of mini-batch RMSprop over `pairs`.

    Shuffling and dropout draw from a generator seeded by (cfg.seed,
    epochs already trained), so a rerun from the same model is identical.
    """
    if not pairs:
        raise DataError("cannot train on an empty pair set")

    out = m.copy()
    rng = np.random.default_rng([cfg.seed, m.epochs_trained])
    order = rng.permutation(len(pairs))
    trainable = out.trainable_names()
    for name in trainable:
        out.opt_state.setdefault(name, np.zeros_like(out.params[name]))

    total, batches = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        q = _stack([pairs[i].callsite_slice for i in idx], out.dtype)
        a = _stack([pairs[i].callee_slice for i in idx], out.dtype)
        y = np.array([pairs[i].y for i in idx], dtype=out.dtype)
        q, a = _check_inputs(out, q, a)

        d, caches = _forward(out, q, a, True, rng)
        loss, dd = _loss_terms(d, y)
        _, _, grads = _backward(out, d, caches, dd)
        out.params.update(_updated_buffers(out, caches))

        for name in trainable:
            g = grads[name]
            cache = out.opt_state[name]
            cache *= cfg.rho
            cache += (1.0 - cfg.rho) * g * g
            out.params[name] -= (cfg.learning_rate * g / (np.sqrt(cache) + cfg.epsilon)).astype(out.dtype)

        total += loss * len(idx)
        batches += 1

    stats = EpochStats(epoch=m.epochs_trained, mean_loss=total / len(pairs), batches=batches)
    out.epochs_trained += 1
    log.info("matcher epoch", extra={"epoch": stats.epoch, "mean_loss": stats.mean_loss})
    return out, stats


def score_matrix(m: SiameseModel, q: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Eval-mode scores for aligned rows of `q` and `a`."""
    q, a = _check_inputs(m, q, a)
    n = q.shape[0]
    scores = np.empty(n, dtype=m.dtype)
    block_q = np.zeros((INFERENCE_BLOCK, q.shape[1]), dtype=m.dtype)
    block_a = np.zeros_like(block_q)
    for start in range(0, n, INFERENCE_BLOCK):
        rows = min(INFERENCE_BLOCK, n - start)
        block_q[:] = 0
        block_a[:] = 0
        block_q[:rows] = q[start:start + rows]
        block_a[:rows] = a[start:start + rows]
        d, _ = _forward(m, block_q, block_a, False, None)
        scores[start:start + rows] = d[:rows]
    return scores


def forward(
    m: SiameseModel,
    q: EmbeddedSlice,
    a: EmbeddedSlice,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Score:
    """Score one pair. Eval mode is deterministic."""
    if train_mode:
        qa, aa = _check_inputs(m, q.flat, a.flat)
        d, _ = _forward(m, qa, aa, True, rng or np.random.default_rng(m.seed))
        return Score(float(d[0]))
    return Score(float(score_matrix(m, q.flat, a.flat)[0]))


def predict_batch(
    m: SiameseModel,
    q_list: Sequence[EmbeddedSlice],
    a_list: Sequence[EmbeddedSlice],
    threshold: float,
    batch_size: int = 512,
) -> list[tuple[Score, Decision]]:
    """
    Score aligned callsite/callee lists `batch_size` pairs at a time.

    Raises:
        DataError: if the lists differ in length
    """
    if len(q_list) != len(a_list):
        raise DataError(f"{len(q_list)} callsites but {len(a_list)} callees")
    results: list[tuple[Score, Decision]] = []
    for start in range(0, len(q_list), batch_size):
        q = _stack(q_list[start:start + batch_size], m.dtype)
        a = _stack(a_list[start:start + batch_size], m.dtype)
        for d in score_matrix(m, q, a):
            score = Score(float(d))
            results.append((score, score.decide(threshold)))
    return results


def saliency(m: SiameseModel, q: EmbeddedSlice, a: EmbeddedSlice, which: Branch) -> np.ndarray:
    """
    Per-token saliency: the L2 norm over embedding dimensions of dd/dx for
    the chosen input, in eval mode.
    """
    qa, aa = _check_inputs(m, q.flat, a.flat)
    d, caches = _forward(m, qa, aa, False, None)
    dq, da, _ = _backward(m, d, caches, np.ones_like(d))
    grad = dq if which is Branch.CALLSITE else da
    return np.linalg.norm(grad.reshape(m.arch.slice_len, m.arch.embed_dim), axis=1)


def transfer_init_matcher(
    pretrained: SiameseModel,
    fresh_sigma_seed: int,
    arch: ArchConfig | None = None,
) -> SiameseModel:
    """
    Copy both feature extractors from `pretrained` and re-initialize the
    classifier from `fresh_sigma_seed`. Optimizer state starts empty.

    Raises:
        ArchMismatchError: if `arch` is given and differs from the pretrained one
    """
    if arch is not None and arch != pretrained.arch:
        raise ArchMismatchError(f"cannot transfer a {pretrained.arch} model into {arch}")
    _, _, sigma = build_networks(pretrained.arch)
    params = {k: v.copy() for k, v in pretrained.params.items() if not k.startswith(SIGMA + ".")}
    params.update(sigma.init(np.random.default_rng([fresh_sigma_seed, 2]), pretrained.dtype))
    return SiameseModel(
        arch=pretrained.arch,
        params=params,
        seed=fresh_sigma_seed,
        vocab_hash=pretrained.vocab_hash,
    )


def save_matcher(m: SiameseModel, path: Path, train: TrainConfig | None = None, manifest_hash: str | None = None):
    tensors = dict(m.params)
    tensors.update({f"opt.{k}": v for k, v in m.opt_state.items()})
    write_container(
        path,
        MATCHER_FORMAT,
        MATCHER_VERSION,
        meta={
            "arch": m.arch.to_dict(),
            "seed": m.seed,
            "epochs_trained": m.epochs_trained,
            "vocab_hash": m.vocab_hash,
            "optimizer": {"name": "rmsprop", **(asdict(train) if train else {})},
            "manifest": manifest_hash,
        },
        tensors=tensors,
    )


def load_matcher(
    path: Path,
    expected_vocab_hash: str | None = None,
    expected_arch: ArchConfig | None = None,
) -> SiameseModel:
    """
    Raises:
        DataError: if the container is unreadable or missing tensors
        VocabMismatchError: if the model was trained against another vocabulary
        ArchMismatchError: if `expected_arch` is given and differs
    """
    meta, tensors = read_container(path, MATCHER_FORMAT, MATCHER_VERSION)
    arch = ArchConfig.from_dict(meta["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise ArchMismatchError(f"{path}: model architecture {arch} != expected {expected_arch}")
    if expected_vocab_hash is not None and meta.get("vocab_hash") != expected_vocab_hash:
        raise VocabMismatchError(
            f"{path}: matcher was trained with vocabulary {meta.get('vocab_hash')}, "
            f"embedder has {expected_vocab_hash}"
        )

    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt_state = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
    model = SiameseModel(
        arch=arch,
        params=params,
        seed=meta["seed"],
        opt_state=opt_state,
        epochs_trained=meta["epochs_trained"],
        vocab_hash=meta.get("vocab_hash"),
    )
    expected = set(init_model_names(arch))
    missing = expected - set(params)
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)[:3]}")
    return model


def init_model_names(arch: ArchConfig) -> list[str]:
    """Every tensor name (parameters and buffers) of a model with `arch`."""
    names: list[str] = []
    for net in build_networks(arch):
        for layer in net.layers:
            names.extend(layer.param_names())
            names.extend(layer.buffers(np.float64))
    return names
