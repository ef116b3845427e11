"""
Dataset assembly, training orchestration and evaluation.

The workflow over a corpus directory (one normalized JSONL per binary plus
an optional truth.jsonl):

    1. split binaries into train / validation / test
    2. pretrain on direct calls: positives from static extraction, negatives
       sampled from (callsite x address-taken callee)
    3. fine-tune on indirect calls, initialized from the pretrained models
       (or from scratch, or not at all for zero-shot)
    4. evaluate on test binaries and emit call graphs

Pairs never cross split buckets: a pair belongs to its binary's bucket.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections import defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TypeVar

import numpy as np

from .callgraph import RecoveredCallGraph, ScoredPair, emit_callgraph
from .config import Config, derive_seed
from .confusion_matrix import MetricsReport, compute_aict, compute_metrics, threshold_for_recall
from .corpus import TRUTH_FILE
from .embedder import EmbeddedSlice, EmbedderModel, embed_slice, load_embedder, save_embedder, train_embedder, transfer_init_embedder
from .errors import ArchMismatchError, DataError, ParseError, VocabMismatchError
from .ingest import (
    CallKind,
    CallsiteRef,
    InsnClass,
    ProgramModel,
    extract_direct_pairs,
    list_callsites,
    parse_program,
    require_function,
)
from .logger import EventLog
from .matcher import (
    PairRecord,
    SiameseModel,
    init_model,
    load_matcher,
    save_matcher,
    score_matrix,
    train_epoch,
    transfer_init_matcher,
)
from .slicer import SYSV, Origin, Slice, slice_callee, slice_callsite, slice_full_function
from .symbolizer import SymbolizationPolicy, build_vocabulary, symbolize_slice

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

BUCKETS = ("train", "validation", "test")
EMBEDDER_FILE = "embedder.cgm"
MATCHER_FILE = "matcher.cgm"

__all__ = [
    "Artifacts", "Dataset", "DatasetSplit", "EmbeddingCache", "LabeledPair", "SliceStore", "TruthEntry",
    "assemble_pairs", "bucket_pairs", "calibrate_threshold", "compare_modes", "compute_aict", "evaluate", "load_dataset",
    "emit_callgraphs", "make_slice", "materialize_pairs", "parallel_map", "predict_program", "run_finetune", "run_pretrain",
    "scoreable_pairs", "split_by_binary", "split_pairs_randomly", "threshold_for_recall",
]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Map `fn` over `items` in order, on a process pool when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- pairs and ground truth --------------------------------------------------

@dataclass(frozen=True, order=True)
class LabeledPair:
    binary_id: str
    cs_addr: int
    callee_addr: int
    y: int

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.binary_id, self.cs_addr, self.callee_addr)

    def to_json(self) -> str:
        return json.dumps({
            "bin": self.binary_id,
            "cs_addr": hex(self.cs_addr),
            "callee_addr": hex(self.callee_addr),
            "y": self.y,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "LabeledPair":
        data = json.loads(line)
        return cls(data["bin"], int(data["cs_addr"], 16), int(data["callee_addr"], 16), int(data["y"]))


@dataclass(frozen=True)
class TruthEntry:
    binary_id: str
    cs_addr: int
    callee_addr: int
    kind: CallKind


def read_truth(path: Path) -> list[TruthEntry]:
    entries = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                entries.append(TruthEntry(
                    data["bin"], int(data["cs_addr"], 16), int(data["callee_addr"], 16), CallKind(data["kind"]),
                ))
            except (KeyError, ValueError) as e:
                raise ParseError(f"bad truth record: {e}", line_no) from e
    return entries


def write_pairs(pairs: Iterable[LabeledPair], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for p in pairs:
            f.write(p.to_json() + "\n")


def direct_positives(programs: Mapping[str, ProgramModel], binaries: Iterable[str]) -> list[LabeledPair]:
    out = []
    for b in sorted(binaries):
        for ref, callee in extract_direct_pairs(programs[b]):
            out.append(LabeledPair(b, ref.addr, callee, 1))
    return out


def indirect_positives(truth: Iterable[TruthEntry], binaries: Iterable[str]) -> list[LabeledPair]:
    wanted = set(binaries)
    return sorted({
        LabeledPair(t.binary_id, t.cs_addr, t.callee_addr, 1)
        for t in truth
        if t.kind is CallKind.INDIRECT and t.binary_id in wanted
    })


def assemble_pairs(
    programs: Mapping[str, ProgramModel],
    positives: Sequence[LabeledPair],
    ratio: float,
    seed: int,
    exclude: Iterable[tuple[str, int, int]] = (),
) -> list[LabeledPair]:
    """
    Positives plus round(ratio * len(positives)) negatives drawn uniformly
    from (callsite of a positive) x (address-taken callee of its binary),
    minus the positives and `exclude`.

    Raises:
        DataError: on no positives, or a candidate pool smaller than requested
    """
    if not positives:
        raise DataError("cannot assemble pairs without positives")
    n_neg = int(round(ratio * len(positives)))
    if n_neg == 0:
        return sorted(positives)

    known = {p.key for p in positives} | set(exclude)
    callsites: dict[str, set[int]] = defaultdict(set)
    for p in positives:
        callsites[p.binary_id].add(p.cs_addr)

    pool: list[tuple[str, int, int]] = []
    for b in sorted(callsites):
        candidates = [fn.start_addr for fn in programs[b].address_taken_functions()]
        for cs in sorted(callsites[b]):
            pool.extend((b, cs, c) for c in candidates if (b, cs, c) not in known)

    if len(pool) < n_neg:
        raise DataError(f"candidate pool has {len(pool)} negatives, {n_neg} requested")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(pool), size=n_neg, replace=False))
    negatives = [LabeledPair(*pool[i], 0) for i in chosen]
    return sorted(list(positives) + negatives)


# --- splits --------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def bucket(self, name: str) -> tuple[str, ...]:
        return getattr(self, name)

    def bucket_of(self, binary_id: str) -> str:
        for name in BUCKETS:
            if binary_id in self.bucket(name):
                return name
        raise DataError(f"binary {binary_id!r} is in no split bucket")

    def check_disjoint(self):
        seen: set[str] = set()
        for name in BUCKETS:
            overlap = seen & set(self.bucket(name))
            if overlap:
                raise DataError(f"binaries {sorted(overlap)} appear in more than one split")
            seen |= set(self.bucket(name))

    def to_dict(self) -> dict:
        return {name: list(self.bucket(name)) for name in BUCKETS}


def _bucket_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    total = sum(ratios)
    active = [r > 0 for r in ratios]
    if n < sum(active):
        raise DataError(f"{n} binaries cannot fill {sum(active)} non-empty split buckets")
    sizes = [int(round(n * r / total)) if a else 0 for r, a in zip(ratios, active)]
    sizes = [max(s, 1) if a else 0 for s, a in zip(sizes, active)]
    while sum(sizes) > n:
        i = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
        sizes[i] -= 1
    while sum(sizes) < n:
        sizes[0 if active[0] else active.index(True)] += 1
    return sizes


def split_by_binary(binary_ids: Iterable[str], ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """
    Partition binaries into train / validation / test.

    Sizes round to the nearest integer; every bucket with a non-zero ratio
    gets at least one binary.

    Raises:
        DataError: if there are fewer binaries than non-zero buckets
    """
    ids = sorted(set(binary_ids))
    sizes = _bucket_sizes(len(ids), ratios)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    split = DatasetSplit(
        train=tuple(sorted(shuffled[:a])),
        validation=tuple(sorted(shuffled[a:b])),
        test=tuple(sorted(shuffled[b:])),
    )
    split.check_disjoint()
    return split


def split_pairs_randomly(
    pairs: Sequence[LabeledPair],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[LabeledPair], list[LabeledPair], list[LabeledPair]]:
    """
    Pair-level random split. Pairs of one binary land in several buckets,
    so test scores are inflated; kept to measure that effect.
    """
    total = sum(ratios)
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(len(pairs) * ratios[0] / total))
    n_val = int(round(len(pairs) * ratios[1] / total))
    pick = [pairs[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


# --- slices and embeddings ---------------------------------------------------

SliceKey = tuple[str, Origin, int]


def make_slice(program: ProgramModel, origin: Origin, addr: int, context: str) -> Slice:
    if context == "full":
        return slice_full_function(program, addr, origin)
    if origin is Origin.CALLSITE:
        fn = require_function(program, addr)
        insn = fn.instruction_at(addr)
        kind = CallKind.INDIRECT if insn is not None and insn.has(InsnClass.INDIRECT_CALL) else CallKind.DIRECT
        return slice_callsite(program, CallsiteRef(program.binary_id, addr, kind, fn.start_addr), SYSV)
    return slice_callee(program, addr, SYSV)


def _slice_binary(job: tuple[ProgramModel, list[tuple[Origin, int]], SymbolizationPolicy, str]) -> list[Slice]:
    program, wanted, policy, context = job
    return [symbolize_slice(make_slice(program, o, a, context), policy) for o, a in wanted]


class SliceStore:
    """Symbolized slices of a set of programs, computed on demand and cached."""

    def __init__(self, programs: Mapping[str, ProgramModel], policy: SymbolizationPolicy, context: str = "sliced"):
        self.programs = programs
        self.policy = policy
        self.context = context
        self._cache: dict[SliceKey, Slice] = {}

    def get(self, binary_id: str, origin: Origin, addr: int) -> Slice:
        key = (binary_id, origin, addr)
        if key not in self._cache:
            self._cache[key] = _slice_binary((self.programs[binary_id], [(origin, addr)], self.policy, self.context))[0]
        return self._cache[key]

    def has_tokens(self, binary_id: str, origin: Origin, addr: int) -> bool:
        return bool(self.get(binary_id, origin, addr).tokens)

    def precompute(self, keys: Iterable[SliceKey], jobs: int = 1):
        per_binary: dict[str, list[tuple[Origin, int]]] = defaultdict(list)
        for b, origin, addr in sorted(set(keys) - set(self._cache), key=lambda k: (k[0], k[1].value, k[2])):
            per_binary[b].append((origin, addr))
        binaries = sorted(per_binary)
        jobs_in = [(self.programs[b], per_binary[b], self.policy, self.context) for b in binaries]
        for b, slices in zip(binaries, parallel_map(_slice_binary, jobs_in, jobs)):
            for (origin, addr), s in zip(per_binary[b], slices):
                self._cache[(b, origin, addr)] = s

    def corpus(self, binaries: Iterable[str], kinds: Iterable[CallKind], jobs: int = 1) -> list[Slice]:
        """Callsite slices of the given kinds plus callee slices of address-taken
        functions and direct-call targets, for `binaries`."""
        kinds = set(kinds)
        keys: list[SliceKey] = []
        for b in sorted(binaries):
            program = self.programs[b]
            keys.extend((b, Origin.CALLSITE, cs.addr) for cs in list_callsites(program) if cs.kind in kinds)
            callees = {fn.start_addr for fn in program.address_taken_functions()}
            if CallKind.DIRECT in kinds:
                callees.update(callee for _, callee in extract_direct_pairs(program))
            keys.extend((b, Origin.CALLEE, c) for c in sorted(callees))
        self.precompute(keys, jobs)
        return [self._cache[k] for k in keys if self._cache[k].tokens]


class EmbeddingCache:
    def __init__(self, embedder: EmbedderModel, store: SliceStore, length: int):
        self.embedder = embedder
        self.store = store
        self.length = length
        self._cache: dict[SliceKey, EmbeddedSlice] = {}

    def get(self, binary_id: str, origin: Origin, addr: int) -> EmbeddedSlice:
        key = (binary_id, origin, addr)
        if key not in self._cache:
            self._cache[key] = embed_slice(self.embedder, self.store.get(*key), self.length)
        return self._cache[key]


def scoreable_pairs(pairs: Sequence[LabeledPair], store: SliceStore) -> tuple[list[LabeledPair], int]:
    """
    Drop pairs whose callsite or callee slice kept no instructions (a callee
    that is only `hlt`, a header without a body). Returns (kept, skipped).
    """
    kept = [
        p for p in pairs
        if store.has_tokens(p.binary_id, Origin.CALLSITE, p.cs_addr)
        and store.has_tokens(p.binary_id, Origin.CALLEE, p.callee_addr)
    ]
    skipped = len(pairs) - len(kept)
    if skipped:
        log.warning("skipped pairs with empty slices", extra={"skipped": skipped, "pairs": len(pairs)})
    return kept, skipped


def materialize_pairs(pairs: Sequence[LabeledPair], embeddings: EmbeddingCache) -> list[PairRecord]:
    """Attach embedded slices to labeled pairs; each slice is embedded once."""
    return [
        PairRecord(
            callsite_slice=embeddings.get(p.binary_id, Origin.CALLSITE, p.cs_addr),
            callee_slice=embeddings.get(p.binary_id, Origin.CALLEE, p.callee_addr),
            y=p.y,
            provenance=p.key,
        )
        for p in pairs
    ]


# --- datasets ----------------------------------------------------------------

def _parse_file(path: Path) -> ProgramModel:
    with open(path) as f:
        try:
            return parse_program(f)
        except ParseError as e:
            raise ParseError(f"{path.name}: {e}") from e


@dataclass
class Dataset:
    programs: dict[str, ProgramModel]
    truth: list[TruthEntry]
    split: DatasetSplit
    store: SliceStore
    inputs: dict[str, Path] = field(default_factory=dict)

    @property
    def exclusion(self) -> set[tuple[str, int, int]]:
        return {(t.binary_id, t.cs_addr, t.callee_addr) for t in self.truth}

    def pairs(self, kind: CallKind, bucket: str, ratio: float, seed: int) -> list[LabeledPair]:
        binaries = self.split.bucket(bucket)
        if kind is CallKind.DIRECT:
            positives = direct_positives(self.programs, binaries)
        else:
            positives = indirect_positives(self.truth, binaries)
        if not positives:
            return []
        pairs = assemble_pairs(self.programs, positives, ratio, seed, exclude=self.exclusion)
        for p in pairs:
            if p.binary_id not in binaries:
                raise DataError(f"pair {p.key} leaked out of the {bucket} split")
        return pairs

    def with_policy(self, policy: SymbolizationPolicy) -> "Dataset":
        if policy == self.store.policy:
            return self
        return dataclasses.replace(self, store=SliceStore(self.programs, policy, self.store.context))


def load_dataset(corpus_dir: Path, config: Config) -> Dataset:
    """
    Parse every binary of `corpus_dir` and split them by binary.

    Raises:
        DataError: if the directory holds no binaries
    """
    paths = sorted(p for p in corpus_dir.glob("*.jsonl") if p.name != TRUTH_FILE)
    if not paths:
        raise DataError(f"no disassembly files in {corpus_dir}")
    programs: dict[str, ProgramModel] = {}
    for path, program in zip(paths, parallel_map(_parse_file, paths, config.pipeline.jobs)):
        if program.binary_id in programs:
            raise DataError(f"binary id {program.binary_id!r} appears in more than one file")
        programs[program.binary_id] = program

    truth_path = corpus_dir / TRUTH_FILE
    truth = read_truth(truth_path) if truth_path.exists() else []
    split = split_by_binary(programs, config.pipeline.split, derive_seed(config.seed, "split"))
    log.info("dataset loaded", extra={"binaries": len(programs), "truth": len(truth), **{
        k: len(v) for k, v in split.to_dict().items()}})
    inputs = {p.name: p for p in paths}
    if truth_path.exists():
        inputs[TRUTH_FILE] = truth_path
    return Dataset(
        programs=programs,
        truth=truth,
        split=split,
        store=SliceStore(programs, config.symbolize, config.pipeline.context),
        inputs=inputs,
    )


# --- artifacts ---------------------------------------------------------------

@dataclass
class Artifacts:
    embedder: EmbedderModel
    matcher: SiameseModel

    def save(self, directory: Path, config: Config | None = None, manifest: str | None = None):
        save_embedder(self.embedder, directory / EMBEDDER_FILE, manifest_hash=manifest)
        save_matcher(self.matcher, directory / MATCHER_FILE, config.train if config else None, manifest_hash=manifest)

    @classmethod
    def load(cls, directory: Path) -> "Artifacts":
        """
        Raises:
            VocabMismatchError: if the matcher was trained against another vocabulary
        """
        embedder = load_embedder(directory / EMBEDDER_FILE)
        matcher = load_matcher(directory / MATCHER_FILE, expected_vocab_hash=embedder.vocab.digest())
        if matcher.arch.embed_dim != embedder.dim:
            raise ArchMismatchError(f"matcher expects k={matcher.arch.embed_dim}, embedder has k={embedder.dim}")
        return cls(embedder=embedder, matcher=matcher)

    @property
    def policy(self) -> SymbolizationPolicy:
        return self.embedder.vocab.policy


def _fit(
    matcher: SiameseModel,
    records: list[PairRecord],
    config: Config,
    epochs: int,
    stage: str,
    events: EventLog | None,
    seed: int,
) -> SiameseModel:
    cfg = dataclasses.replace(config.train, seed=seed)
    for _ in range(epochs):
        matcher, stats = train_epoch(matcher, records, cfg)
        if events:
            events.log(stage, epoch=stats.epoch, mean_loss=stats.mean_loss, batches=stats.batches)
    return matcher


def _validate(artifacts: Artifacts, data: Dataset, kind: CallKind, config: Config, stage: str,
              events: EventLog | None) -> MetricsReport | None:
    if not data.split.validation:
        return None
    pairs = data.pairs(kind, "validation", config.pipeline.negative_ratio, derive_seed(config.seed, f"{stage}-val"))
    if not pairs:
        return None
    report = evaluate(artifacts, data, pairs, config.train.threshold, batch_size=config.train.batch_size)
    if events:
        events.log(f"{stage}-validation", precision=report.precision, recall=report.recall, f1=report.f1)
    return report


def run_pretrain(data: Dataset, config: Config, events: EventLog | None = None) -> tuple[Artifacts, MetricsReport | None]:
    """
    Train the direct-call learner on the train split.

    The vocabulary covers direct and indirect slices of train binaries so
    that fine-tuning can reuse it; the embedder is trained on direct-call
    slices only.

    Raises:
        DataError: if the train split has no direct-call pairs
    """
    jobs = config.pipeline.jobs
    train_bins = data.split.train
    pairs = data.pairs(CallKind.DIRECT, "train", config.pipeline.negative_ratio, derive_seed(config.seed, "pretrain-negatives"))
    if not pairs:
        raise DataError("the train split has no direct-call pairs")

    vocab = build_vocabulary(data.store.corpus(train_bins, (CallKind.DIRECT, CallKind.INDIRECT), jobs), data.store.policy)
    embed_cfg = dataclasses.replace(config.embed, seed=derive_seed(config.seed, "pretrain-embed"))
    embedder = train_embedder(data.store.corpus(train_bins, (CallKind.DIRECT,), jobs), vocab, embed_cfg)

    matcher = init_model(config.arch, derive_seed(config.seed, "matcher"), vocab_hash=vocab.digest())
    pairs, skipped = scoreable_pairs(pairs, data.store)
    if not pairs:
        raise DataError("every direct-call pair of the train split has an empty slice")
    records = materialize_pairs(pairs, EmbeddingCache(embedder, data.store, config.arch.slice_len))
    if events:
        events.log("pretrain", pairs=len(pairs), positives=sum(p.y for p in pairs), skipped=skipped, vocab=vocab.size)
    matcher = _fit(matcher, records, config, config.train.epochs, "pretrain", events, derive_seed(config.seed, "pretrain-train"))

    artifacts = Artifacts(embedder=embedder, matcher=matcher)
    return artifacts, _validate(artifacts, data, CallKind.DIRECT, config, "pretrain", events)


def run_finetune(
    pretrained: Artifacts,
    data: Dataset,
    config: Config,
    mode: str | None = None,
    events: EventLog | None = None,
) -> tuple[Artifacts, MetricsReport | None]:
    """
    Train the indirect-call learner.

    transfer   embedder and both feature extractors start from `pretrained`,
               the classifier from a fresh seed; everything is trained
    scratch    new vocabulary, embedder and matcher from the icall data alone
    zero-shot  `pretrained` unchanged (also the result of zero fine-tune epochs)

    Raises:
        DataError: if the train split has no indirect-call ground truth
        ArchMismatchError / VocabMismatchError: if `pretrained` does not fit `config`
    """
    mode = mode or config.pipeline.finetune_mode
    jobs = config.pipeline.jobs
    train_bins = data.split.train

    if mode != "scratch":
        if pretrained.matcher.arch != config.arch:
            raise ArchMismatchError(f"pretrained architecture {pretrained.matcher.arch} != configured {config.arch}")
        if pretrained.policy != data.store.policy:
            raise VocabMismatchError(
                f"pretrained vocabulary uses {pretrained.policy.to_dict()}, data uses {data.store.policy.to_dict()}"
            )

    if mode == "zero-shot" or (mode == "transfer" and config.pipeline.finetune_epochs == 0
                               and config.pipeline.embed_finetune_epochs == 0):
        return pretrained, _validate(pretrained, data, CallKind.INDIRECT, config, "zero-shot", events)

    pairs = data.pairs(CallKind.INDIRECT, "train", config.pipeline.negative_ratio, derive_seed(config.seed, "finetune-negatives"))
    if not pairs:
        raise DataError("the train split has no indirect-call ground truth (missing truth.jsonl?)")
    icall_corpus = data.store.corpus(train_bins, (CallKind.INDIRECT,), jobs)
    embed_seed = derive_seed(config.seed, f"{mode}-embed")

    if mode == "transfer":
        embedder = transfer_init_embedder(pretrained.embedder, pretrained.embedder.vocab)
        if config.pipeline.embed_finetune_epochs > 0:
            cfg = dataclasses.replace(config.embed, epochs=config.pipeline.embed_finetune_epochs, seed=embed_seed)
            embedder = train_embedder(icall_corpus, embedder.vocab, cfg, init=embedder)
        matcher = transfer_init_matcher(pretrained.matcher, derive_seed(config.seed, "sigma"), arch=config.arch)
    elif mode == "scratch":
        vocab = build_vocabulary(icall_corpus, data.store.policy)
        embedder = train_embedder(icall_corpus, vocab, dataclasses.replace(config.embed, seed=embed_seed))
        matcher = init_model(config.arch, derive_seed(config.seed, "scratch-matcher"), vocab_hash=vocab.digest())
    else:
        raise DataError(f"unknown fine-tune mode {mode!r}")

    pairs, skipped = scoreable_pairs(pairs, data.store)
    if not pairs:
        raise DataError("every indirect-call pair of the train split has an empty slice")
    records = materialize_pairs(pairs, EmbeddingCache(embedder, data.store, config.arch.slice_len))
    if events:
        events.log(f"finetune-{mode}", pairs=len(pairs), positives=sum(p.y for p in pairs), skipped=skipped)
    matcher = _fit(matcher, records, config, config.pipeline.finetune_epochs, f"finetune-{mode}", events,
                   derive_seed(config.seed, f"{mode}-train"))

    artifacts = Artifacts(embedder=embedder, matcher=matcher)
    return artifacts, _validate(artifacts, data, CallKind.INDIRECT, config, f"finetune-{mode}", events)


# --- inference and evaluation ------------------------------------------------

def _scores(artifacts: Artifacts, records: Sequence[PairRecord], batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        q = np.stack([r.callsite_slice.flat for r in chunk])
        a = np.stack([r.callee_slice.flat for r in chunk])
        out.append(score_matrix(artifacts.matcher, q, a))
    return np.concatenate(out) if out else np.zeros(0)


def predict_program(
    artifacts: Artifacts,
    store: SliceStore,
    program: ProgramModel,
    threshold: float,
    batch_size: int = 512,
) -> list[ScoredPair]:
    """Score every indirect callsite of `program` against every address-taken function."""
    b = program.binary_id
    icalls = [cs for cs in list_callsites(program) if cs.kind is CallKind.INDIRECT]
    candidates = [fn.start_addr for fn in program.address_taken_functions()]
    scoreable_icalls = [cs for cs in icalls if store.has_tokens(b, Origin.CALLSITE, cs.addr)]
    scoreable_candidates = [c for c in candidates if store.has_tokens(b, Origin.CALLEE, c)]
    if len(scoreable_icalls) < len(icalls) or len(scoreable_candidates) < len(candidates):
        log.warning("skipped empty slices", extra={
            "bin": b,
            "callsites": len(icalls) - len(scoreable_icalls),
            "candidates": len(candidates) - len(scoreable_candidates),
        })
    if not scoreable_icalls or not scoreable_candidates:
        return []
    pairs = [LabeledPair(b, cs.addr, c, 0) for cs in scoreable_icalls for c in scoreable_candidates]
    embeddings = EmbeddingCache(artifacts.embedder, store, artifacts.matcher.arch.slice_len)
    scores = _scores(artifacts, materialize_pairs(pairs, embeddings), batch_size)
    return [
        ScoredPair(p.binary_id, p.cs_addr, p.callee_addr, float(d), bool(d < threshold))
        for p, d in zip(pairs, scores)
    ]


def evaluate(
    artifacts: Artifacts,
    data: Dataset,
    pairs: Sequence[LabeledPair],
    threshold: float,
    batch_size: int = 512,
    with_aict: bool = True,
) -> MetricsReport:
    """
    Confusion counts at `threshold`, the PR curve and, over the indirect
    callsites of the pairs' binaries, AICT.
    """
    store = data.with_policy(artifacts.policy).store
    pairs, skipped = scoreable_pairs(pairs, store)
    embeddings = EmbeddingCache(artifacts.embedder, store, artifacts.matcher.arch.slice_len)
    scores = _scores(artifacts, materialize_pairs(pairs, embeddings), batch_size)
    report = compute_metrics(scores, [p.y for p in pairs], threshold)
    report.skipped = skipped

    if with_aict:
        grouped: dict[tuple[str, int], list[float]] = {}
        candidates = 0
        for b in sorted({p.binary_id for p in pairs}):
            program = data.programs[b]
            candidates += len(program.address_taken_functions())
            for sp in predict_program(artifacts, store, program, threshold, batch_size):
                grouped.setdefault((b, sp.callsite), []).append(sp.d)
        report.aict = compute_aict(grouped, threshold)
        report.callsites = len(grouped)
        report.candidates = candidates
    return report


def emit_callgraphs(
    artifacts: Artifacts,
    data: Dataset,
    binaries: Iterable[str],
    threshold: float,
    batch_size: int = 512,
) -> dict[str, RecoveredCallGraph]:
    store = data.with_policy(artifacts.policy).store
    graphs = {}
    for b in sorted(binaries):
        program = data.programs[b]
        graphs[b] = emit_callgraph(program, predict_program(artifacts, store, program, threshold, batch_size), threshold)
    return graphs


def compare_modes(
    pretrained: Artifacts,
    data: Dataset,
    config: Config,
    modes: Sequence[str] = ("scratch", "transfer", "zero-shot"),
    events: EventLog | None = None,
) -> dict[str, MetricsReport]:
    """Fine-tune under each mode with the same epoch count and evaluate on test binaries."""
    pairs = data.pairs(CallKind.INDIRECT, "test", config.pipeline.negative_ratio, derive_seed(config.seed, "test-negatives"))
    if not pairs:
        raise DataError("the test split has no indirect-call ground truth")
    reports = {}
    for mode in modes:
        artifacts, _ = run_finetune(pretrained, data, config, mode=mode, events=events)
        reports[mode] = evaluate(artifacts, data, pairs, config.train.threshold, config.train.batch_size)
        if events:
            events.log(f"compare-{mode}", precision=reports[mode].precision, recall=reports[mode].recall,
                       f1=reports[mode].f1, aict=reports[mode].aict)
    return reports


def bucket_pairs(data: Dataset, config: Config, kind: CallKind = CallKind.INDIRECT, bucket: str = "test") -> list[LabeledPair]:
    return data.pairs(kind, bucket, config.pipeline.negative_ratio, derive_seed(config.seed, f"{bucket}-negatives"))


def calibrate_threshold(artifacts: Artifacts, data: Dataset, config: Config, kind: CallKind = CallKind.INDIRECT) -> float:
    """
    Threshold reaching `pipeline.target_recall` on validation pairs, or the
    configured threshold when no target is set or no validation data exists.
    """
    target = config.pipeline.target_recall
    if target is None:
        return config.train.threshold
    store = data.with_policy(artifacts.policy).store
    pairs = bucket_pairs(data, config, kind, "validation") if data.split.validation else []
    pairs, _ = scoreable_pairs(pairs, store)
    if not any(p.y for p in pairs):
        log.warning("no validation positives; keeping the configured threshold")
        return config.train.threshold
    embeddings = EmbeddingCache(artifacts.embedder, store, artifacts.matcher.arch.slice_len)
    scores = _scores(artifacts, materialize_pairs(pairs, embeddings), config.train.batch_size)
    tau = threshold_for_recall(scores, [p.y for p in pairs], target)
    log.info("threshold calibrated", extra={"target_recall": target, "threshold": tau})
    return tau
