"""
Run configuration.

A config file is TOML with one table per stage; every key is optional and
falls back to the dataclass default:

    seed = 7

    [symbolize]
    policy = "loose"
    modulus = 10

    [embed]      # EmbedderConfig
    [train]      # TrainConfig
    [arch]       # ArchConfig
    [pipeline]   # PipelineConfig
    [corpus]     # CorpusConfig (gen-corpus)

All randomness derives from the root `seed` through named sub-seeds.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomli
except ImportError:
    import tomllib as tomli  # Python 3.11+

import tomli_w

from . import __version__
from .corpus import CorpusConfig
from .embedder import EmbedderConfig
from .errors import ConfigError
from .matcher import ArchConfig, TrainConfig
from .symbolizer import SymbolizationPolicy

CONTEXT_MODES = ("sliced", "full")
FINETUNE_MODES = ("transfer", "scratch", "zero-shot")


@dataclass(frozen=True)
class PipelineConfig:
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    negative_ratio: float = 1.0
    context: str = "sliced"
    jobs: int = 1
    finetune_mode: str = "transfer"
    finetune_epochs: int = 20
    embed_finetune_epochs: int = 2
    target_recall: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(self.split))
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) <= 0:
            raise ConfigError(f"split must be three non-negative ratios, got {self.split}")
        if self.negative_ratio < 0:
            raise ConfigError(f"negative ratio must be >= 0, got {self.negative_ratio}")
        if self.context not in CONTEXT_MODES:
            raise ConfigError(f"context must be one of {CONTEXT_MODES}, got {self.context!r}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ConfigError(f"finetune mode must be one of {FINETUNE_MODES}, got {self.finetune_mode!r}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.target_recall is not None and not 0.0 < self.target_recall <= 1.0:
            raise ConfigError(f"target recall must be in (0, 1], got {self.target_recall}")


def _build(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from e


def _section(obj) -> dict:
    out = {}
    for k, v in dataclasses.asdict(obj).items():
        if v is None:
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


@dataclass(frozen=True)
class Config:
    seed: int = 0
    symbolize: SymbolizationPolicy = field(default_factory=SymbolizationPolicy)
    embed: EmbedderConfig = field(default_factory=EmbedderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        sym = data.get("symbolize", {})
        unknown = set(sym) - {"policy", "modulus"}
        if unknown:
            raise ConfigError(f"[symbolize] has unknown keys: {', '.join(sorted(unknown))}")
        policy = SymbolizationPolicy.parse(sym.get("policy", "loose"), sym.get("modulus", 10))

        embed = _build(EmbedderConfig, data.get("embed", {}), "embed")
        arch_data = dict(data.get("arch", {}))
        arch_data.setdefault("embed_dim", embed.dim)
        arch = _build(ArchConfig, arch_data, "arch")
        if arch.embed_dim != embed.dim:
            raise ConfigError(f"[arch] embed_dim {arch.embed_dim} != [embed] dim {embed.dim}")

        return cls(
            seed=int(data.get("seed", 0)),
            symbolize=policy,
            embed=embed,
            train=_build(TrainConfig, data.get("train", {}), "train"),
            arch=arch,
            pipeline=_build(PipelineConfig, data.get("pipeline", {}), "pipeline"),
            corpus=_build(CorpusConfig, data.get("corpus", {}), "corpus"),
        )

    @classmethod
    def load(cls, path: Path) -> "Config":
        """Load config from TOML file."""
        try:
            with open(path, "rb") as f:
                data = tomli.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "symbolize": {"policy": self.symbolize.mode.value, "modulus": self.symbolize.modulus},
            "embed": _section(self.embed),
            "train": _section(self.train),
            "arch": _section(self.arch),
            "pipeline": _section(self.pipeline),
            "corpus": _section(self.corpus),
        }

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dump(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())

    def replace(self, **sections) -> "Config":
        return dataclasses.replace(self, **sections)


def derive_seed(root_seed: int, name: str) -> int:
    """Deterministic named sub-seed of `root_seed`."""
    digest = hashlib.blake2b(f"{root_seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def config_hash(config: Config) -> str:
    return hashlib.sha256(config.dumps().encode()).hexdigest()[:16]


MANIFEST_FILE = "manifest.json"


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What a run was made from: config, seed, input digests and tool version."""
    config_hash: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # file name -> sha256
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__

    @classmethod
    def create(cls, config: Config, inputs: dict[str, Path] | None = None) -> "RunManifest":
        return cls(
            config_hash=config_hash(config),
            seed=config.seed,
            inputs={name: file_sha256(p) for name, p in sorted((inputs or {}).items())},
        )

    @property
    def digest(self) -> str:
        """Identity of the run; excludes the artifact list, which refers back to it."""
        payload = json.dumps(
            {"config_hash": self.config_hash, "seed": self.seed, "inputs": self.inputs, "version": self.version},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "digest": self.digest}

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
