"""
Instruction tokenizer and symbolizer.

Disassembly is full of open-set tokens: addresses, immediates, function and
variable names, string literals. A model trained on one binary would meet
unseen variants of all of them in the next one. Symbolization rewrites those
tokens into a closed alphabet:

    strict   every name of a class collapses to one token (sub_43B9D0 -> fun)
    loose    the class token keeps the hex value modulo N (sub_43B9D0 -> fun0)

Name classes are detected by the disassembler's naming prefixes
(loc_, sub_, var_, ...). Bare immediates always become "num".
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import zlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import ConfigError, DataError
from .x86 import CALL_MNEMONICS, SEGMENT_REGISTERS, SIZE_KEYWORDS, canonical_register

if TYPE_CHECKING:
    from .slicer import Slice


_TOKEN_RE = re.compile(
    r"""
      "(?:[^"\\]|\\.)*"                 # double-quoted string literal
    | '(?:[^'\\]|\\.)*'                 # single-quoted string literal
    | st\(\d\)                          # x87 stack register
    | 0[xX][0-9A-Fa-f]+                 # 0x-prefixed hex
    | [0-9][0-9A-Fa-f]*[hH](?![\w])     # IDA-style hex (20h, 0FFh)
    | [0-9]+(?![\w])                    # decimal
    | [A-Za-z_.$@?][\w.$@?]*            # mnemonics, registers, names
    | \S                                # punctuation and anything else
    """,
    re.VERBOSE,
)

_NUMBER_RE = re.compile(r"^(?:0[xX][0-9A-Fa-f]+|[0-9][0-9A-Fa-f]*[hH]|[0-9]+)$")

# Symbol classes after rewriting. "num" has no loose variants.
SYMBOL_BASES = ("loc", "arg", "fun", "var", "struct", "unk", "byte", "offset", "word", "flt", "dbl", "str")

_SYMBOL_RE = re.compile(r"^(" + "|".join(SYMBOL_BASES) + r")(\d+)?$")

DEFAULT_PREFIXES: dict[str, str] = {
    "loc_": "loc",
    "arg_": "arg",
    "sub_": "fun",
    "var_": "var",
    "struct_": "struct",
    "stru_": "struct",
    "unk_": "unk",
    "byte_": "byte",
    "off_": "offset",
    "word_": "word",
    "dword_": "word",
    "qword_": "word",
    "xmmword_": "word",
    "ymmword_": "word",
    "oword_": "word",
    "tbyte_": "word",
    "flt_": "flt",
    "dbl_": "dbl",
}

PAD = "<pad>"
UNK = "<unk>"

VOCAB_FORMAT = "cgforge-vocab"
VOCAB_VERSION = 1


class SymbolizationMode(Enum):
    STRICT = "strict"
    LOOSE = "loose"


@dataclass(frozen=True)
class SymbolizationPolicy:
    """How open-set tokens are rewritten."""
    mode: SymbolizationMode = SymbolizationMode.LOOSE
    modulus: int = 10
    prefixes: tuple[tuple[str, str], ...] = tuple(DEFAULT_PREFIXES.items())

    def __post_init__(self):
        if self.modulus < 1:
            raise ConfigError(f"symbolization modulus must be >= 1, got {self.modulus}")

    @classmethod
    def parse(cls, mode: str, modulus: int = 10) -> "SymbolizationPolicy":
        try:
            return cls(mode=SymbolizationMode(mode.lower()), modulus=modulus)
        except ValueError as e:
            raise ConfigError(f"unknown symbolization policy: {mode!r}") from e

    @property
    def prefix_table(self) -> dict[str, str]:
        return dict(self.prefixes)

    def to_dict(self) -> dict:
        return {"policy": self.mode.value, "N": self.modulus}


def tokenize(insn_text: str) -> list[str]:
    """
    Split one instruction into tokens.

    Examples:
        >>> tokenize("mov rax, [rdi]")
        ['mov', 'rax', ',', '[', 'rdi', ']']
        >>> tokenize("lea rsi, [rbp-0x20]")
        ['lea', 'rsi', ',', '[', 'rbp', '-', '0x20', ']']
    """
    return _TOKEN_RE.findall(insn_text)


def is_number(token: str) -> bool:
    return bool(_NUMBER_RE.match(token))


def parse_number(token: str) -> int:
    """Parse 0x1F, 1Fh or 31 into an int."""
    if token[:2] in ("0x", "0X"):
        return int(token, 16)
    if token[-1] in "hH":
        return int(token[:-1], 16)
    return int(token)


def _name_value(rest: str) -> int:
    try:
        return int(rest, 16)
    except ValueError:
        return zlib.crc32(rest.encode())


def _string_length(token: str) -> int | None:
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "\"'":
        return len(token) - 2
    # IDA names string literals aHelloWorld
    if len(token) >= 2 and token[0] == "a" and (token[1].isupper() or token[1].isdigit()):
        return len(token) - 1
    return None


def _loose(base: str, value: int, policy: SymbolizationPolicy) -> str:
    if policy.mode is SymbolizationMode.STRICT:
        return base
    return f"{base}{value % policy.modulus}"


def symbolize_token(tok: str, policy: SymbolizationPolicy) -> str:
    """
    Rewrite one token into the closed alphabet.

    Examples:
        >>> loose = SymbolizationPolicy(SymbolizationMode.LOOSE, 10)
        >>> symbolize_token("sub_43B9D0", loose)
        'fun0'
        >>> symbolize_token("loc_4008", loose)
        'loc2'
        >>> symbolize_token("20h", loose)
        'num'
    """
    if not tok:
        return tok

    length = _string_length(tok)
    if length is not None:
        return _loose("str", length, policy)

    if is_number(tok):
        return "num"

    underscore = tok.find("_")
    if underscore > 0:
        base = policy.prefix_table.get(tok[:underscore + 1].lower())
        if base is not None:
            return _loose(base, _name_value(tok[underscore + 1:]), policy)

    return tok


def _direct_target_value(tok: str) -> int:
    if is_number(tok):
        return parse_number(tok)
    underscore = tok.find("_")
    if underscore > 0:
        return _name_value(tok[underscore + 1:])
    return _name_value(tok)


def _is_direct_target(tok: str) -> bool:
    low = tok.lower()
    if tok in ("[", "]", "num") or low in SIZE_KEYWORDS or low in SEGMENT_REGISTERS:
        return False
    if canonical_register(tok) is not None:
        return False
    if is_number(tok):
        return True
    return bool(re.match(r"^[A-Za-z_.$@?][\w.$@?]*$", tok))


def symbolize_tokens(tokens: Sequence[str], policy: SymbolizationPolicy) -> list[str]:
    """Symbolize a token stream, treating direct-call operands as functions."""
    out: list[str] = []
    after_call = False
    for tok in tokens:
        low = tok.lower()
        if after_call and _is_direct_target(tok) and symbol_base(tok) is None:
            out.append(_loose("fun", _direct_target_value(tok), policy))
        else:
            out.append(symbolize_token(tok, policy))
        after_call = low in CALL_MNEMONICS
    return out


def symbolize_slice(s: Slice, policy: SymbolizationPolicy) -> Slice:
    """Return a copy of `s` with every token symbolized."""
    return dataclasses.replace(s, tokens=tuple(symbolize_tokens(s.tokens, policy)))


def symbol_base(token: str) -> str | None:
    """Return the class of a symbolized token ("fun7" -> "fun"), or None.

    Bare size keywords ("byte ptr", "word ptr") are operand syntax, not symbols.
    """
    if token.lower() in SIZE_KEYWORDS:
        return None
    m = _SYMBOL_RE.match(token)
    return m.group(1) if m else None


def strip_suffix(token: str) -> str:
    """Map a loose symbol to its strict form; other tokens are unchanged."""
    return symbol_base(token) or token


@dataclass
class Vocabulary:
    """Closed token set with dense indices; PAD=0 and UNK=1."""
    tokens: list[str]
    policy: SymbolizationPolicy
    token_to_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise DataError("vocabulary must start with the PAD and UNK tokens")
        self.token_to_index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def index(self, token: str) -> int:
        return self.token_to_index.get(token, 1)

    def indices(self, tokens: Iterable[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def digest(self) -> str:
        """Stable hash over policy and token list."""
        h = hashlib.sha256()
        h.update(json.dumps(self.policy.to_dict(), sort_keys=True).encode())
        for tok in self.tokens:
            h.update(tok.encode())
            h.update(b"\0")
        return h.hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps({
            "format": VOCAB_FORMAT,
            "version": VOCAB_VERSION,
            **self.policy.to_dict(),
            "tokens": self.tokens,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        data = json.loads(text)
        if data.get("format") != VOCAB_FORMAT or data.get("version") != VOCAB_VERSION:
            raise DataError("not a cgforge vocabulary file (or unsupported version)")
        policy = SymbolizationPolicy.parse(data["policy"], data["N"])
        return cls(tokens=list(data["tokens"]), policy=policy)

    def save(self, path: Path):
        path.write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        return cls.from_json(path.read_text())


def closed_alphabet(policy: SymbolizationPolicy) -> list[str]:
    """Every token symbolization can produce under `policy`, besides pass-through tokens."""
    if policy.mode is SymbolizationMode.STRICT:
        return ["num", *SYMBOL_BASES]
    return ["num"] + [f"{base}{r}" for base in SYMBOL_BASES for r in range(policy.modulus)]


def build_vocabulary(corpus: Iterable[Slice | Sequence[str]], policy: SymbolizationPolicy) -> Vocabulary:
    """
    Collect every symbolized token of `corpus` into a Vocabulary.

    Indices are assigned lexicographically after PAD and UNK. The whole
    closed alphabet of `policy` is always included, so only pass-through
    tokens never seen here can fall to UNK.
    """
    seen: set[str] = set()
    empty = True
    for item in corpus:
        empty = False
        tokens = item.tokens if hasattr(item, "tokens") else item
        seen.update(tokens)
    if empty:
        raise DataError("cannot build a vocabulary from an empty corpus")

    seen.discard(PAD)
    seen.discard(UNK)
    seen.update(closed_alphabet(policy))

    return Vocabulary(tokens=[PAD, UNK] + sorted(seen), policy=policy)
