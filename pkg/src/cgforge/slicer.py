"""
Callsite and callee slicing.

A slice keeps the instructions of one function that can carry calling
convention information:

    callsite   before and including the call: stack instructions and
               instructions naming an argument register; after the call:
               instructions naming a return register
    callee     over the whole body: stack instructions and instructions
               naming an argument or return register

Both kinds also keep every instruction that references global data and
every control-flow instruction. Traversal is linear in address order.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ParseError, SliceError
from .ingest import CallsiteRef, InsnClass, InstructionModel, ProgramModel, require_function


class Origin(Enum):
    CALLSITE = "callsite"
    CALLEE = "callee"


class Phase(Enum):
    PRE_CALL = "pre_call"
    POST_CALL = "post_call"
    CALLEE = "callee"


class Reason(Enum):
    STACK = "stack"
    ARG_REG = "arg_reg"
    RET_REG = "ret_reg"
    GLOBAL = "global"
    CONTROL = "control"


@dataclass(frozen=True)
class RegisterConvention:
    """System V AMD64 data-passing registers."""
    arg_int: tuple[str, ...] = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
    ret_int: tuple[str, ...] = ("rax", "rdx")
    arg_sse: tuple[str, ...] = tuple(f"xmm{i}" for i in range(8))
    ret_sse: tuple[str, ...] = ("xmm0", "xmm1")
    ret_x87: tuple[str, ...] = ("st0", "st1")
    include_sse_x87: bool = True

    @property
    def arg_registers(self) -> frozenset[str]:
        regs = set(self.arg_int)
        if self.include_sse_x87:
            regs.update(self.arg_sse)
        return frozenset(regs)

    @property
    def ret_registers(self) -> frozenset[str]:
        regs = set(self.ret_int)
        if self.include_sse_x87:
            regs.update(self.ret_sse)
            regs.update(self.ret_x87)
        return frozenset(regs)


SYSV = RegisterConvention()


@dataclass(frozen=True)
class Slice:
    """
    Token sequence for one callsite or callee.

    `lengths[i]` is the number of tokens contributed by `kept_addrs[i]`;
    `anchor` is the index of the first token of the call instruction in a
    callsite slice (0 for callees).
    """
    origin: Origin
    binary_id: str
    addr: int
    tokens: tuple[str, ...]
    kept_addrs: tuple[int, ...]
    lengths: tuple[int, ...] = ()
    anchor: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def instruction_tokens(self) -> Iterator[tuple[int, tuple[str, ...]]]:
        """Yield (address, tokens) per kept instruction."""
        pos = 0
        for addr, n in zip(self.kept_addrs, self.lengths):
            yield addr, self.tokens[pos:pos + n]
            pos += n

    def to_json(self) -> str:
        return json.dumps({
            "origin": self.origin.value,
            "bin": self.binary_id,
            "addr": hex(self.addr),
            "tokens": list(self.tokens),
            "kept": [hex(a) for a in self.kept_addrs],
            "lengths": list(self.lengths),
            "anchor": self.anchor,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Slice":
        data = json.loads(line)
        return cls(
            origin=Origin(data["origin"]),
            binary_id=data["bin"],
            addr=int(data["addr"], 16),
            tokens=tuple(data["tokens"]),
            kept_addrs=tuple(int(a, 16) for a in data["kept"]),
            lengths=tuple(data.get("lengths", ())),
            anchor=data.get("anchor", 0),
        )


def classify_instruction(
    insn: InstructionModel,
    conv: RegisterConvention,
    phase: Phase,
) -> tuple[bool, frozenset[Reason]]:
    """Return (keep, reasons) for one instruction in the given phase."""
    reasons: set[Reason] = set()

    if insn.has(InsnClass.CONTROL_FLOW):
        reasons.add(Reason.CONTROL)
    if insn.has(InsnClass.REFERENCES_GLOBAL):
        reasons.add(Reason.GLOBAL)

    if phase in (Phase.PRE_CALL, Phase.CALLEE):
        if insn.has(InsnClass.STACK):
            reasons.add(Reason.STACK)
        if insn.registers & conv.arg_registers:
            reasons.add(Reason.ARG_REG)
    if phase in (Phase.POST_CALL, Phase.CALLEE):
        if insn.registers & conv.ret_registers:
            reasons.add(Reason.RET_REG)

    return bool(reasons), frozenset(reasons)


def _build_slice(
    origin: Origin,
    binary_id: str,
    addr: int,
    kept: list[InstructionModel],
    anchor_addr: int | None = None,
) -> Slice:
    tokens: list[str] = []
    lengths: list[int] = []
    anchor = 0
    for insn in kept:
        if insn.addr == anchor_addr:
            anchor = len(tokens)
        toks = insn.tokens
        tokens.extend(toks)
        lengths.append(len(toks))
    return Slice(
        origin=origin,
        binary_id=binary_id,
        addr=addr,
        tokens=tuple(tokens),
        kept_addrs=tuple(i.addr for i in kept),
        lengths=tuple(lengths),
        anchor=anchor,
    )


def slice_callsite(p: ProgramModel, cs: CallsiteRef, conv: RegisterConvention = SYSV) -> Slice:
    """
    Slice the function enclosing `cs`.

    Raises:
        SliceError: if `cs` is not an instruction inside a function of `p`
    """
    fn = require_function(p, cs.addr)
    if fn.instruction_at(cs.addr) is None:
        raise SliceError(f"{p.binary_id}: no instruction at callsite {cs.addr:#x}")

    kept = []
    for insn in fn.instructions:
        phase = Phase.PRE_CALL if insn.addr <= cs.addr else Phase.POST_CALL
        keep, _ = classify_instruction(insn, conv, phase)
        if keep:
            kept.append(insn)
    return _build_slice(Origin.CALLSITE, p.binary_id, cs.addr, kept, anchor_addr=cs.addr)


def _callee_body(p: ProgramModel, callee_start: int) -> tuple[InstructionModel, ...]:
    fn = p.function_at(callee_start)
    if fn is None:
        raise SliceError(f"{p.binary_id}: callee {callee_start:#x} is outside all code")
    # Forced to be a function start: drop anything before it.
    return tuple(i for i in fn.instructions if i.addr >= callee_start)


def slice_callee(p: ProgramModel, callee_start: int, conv: RegisterConvention = SYSV) -> Slice:
    """
    Slice a callee, treating `callee_start` as a function entry.

    Raises:
        SliceError: if `callee_start` lies outside every function
    """
    kept = [
        insn for insn in _callee_body(p, callee_start)
        if classify_instruction(insn, conv, Phase.CALLEE)[0]
    ]
    return _build_slice(Origin.CALLEE, p.binary_id, callee_start, kept)


def slice_full_function(p: ProgramModel, addr: int, origin: Origin) -> Slice:
    """
    The unsliced context: every instruction of the function.

    For a callsite the whole enclosing function is returned with the anchor
    on the call; for a callee, the body from `addr` onward.
    """
    if origin is Origin.CALLSITE:
        fn = require_function(p, addr)
        return _build_slice(origin, p.binary_id, addr, list(fn.instructions), anchor_addr=addr)
    return _build_slice(origin, p.binary_id, addr, list(_callee_body(p, addr)))


def write_slices(slices: Iterable[Slice], path: Path) -> int:
    count = 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for s in slices:
            f.write(s.to_json() + "\n")
            count += 1
    return count


def iter_slices(path: Path) -> Iterator[Slice]:
    """Iterate over a slice JSONL file."""
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield Slice.from_json(line)
            except (KeyError, ValueError) as e:
                raise ParseError(f"bad slice record: {e}", line_no) from e


@dataclass
class SliceReport:
    """Counts of kept instructions per reason, for `cgforge slice --verbose`."""
    kept: int = 0
    dropped: int = 0
    by_reason: dict[str, int] = field(default_factory=dict)

    def add(self, keep: bool, reasons: frozenset[Reason]):
        if keep:
            self.kept += 1
        else:
            self.dropped += 1
        for r in reasons:
            self.by_reason[r.value] = self.by_reason.get(r.value, 0) + 1
