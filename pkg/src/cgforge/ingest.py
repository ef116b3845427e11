"""
Normalized disassembly ingest.

Input is JSONL, one object per line:

    {"bin": "ls", "func_start": "0x401000", "name": "main"}                  function header
    {"bin": "ls", "func": "0x401000", "func_end": "0x401040",
     "addr": "0x401004", "text": "mov rax, [rdi]", "xref_data": ["0x604010"]}  instruction
    {"bin": "ls", "data_ptr": "0x604010", "target": "0x401200"}              code pointer stored in data

The third record kind is optional; importers emit it for function-pointer
tables so that functions only referenced from data count as address-taken.
"""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from enum import Enum

from .errors import ModelError, ParseError, SliceError
from .symbolizer import is_number, parse_number, tokenize
from .x86 import (
    CALL_MNEMONICS,
    PREFIXES,
    SEGMENT_REGISTERS,
    SIZE_KEYWORDS,
    STACK_MNEMONICS,
    STACK_POINTERS,
    canonical_register,
    is_control_flow,
)

# Data-symbol naming prefixes; an operand named like this reads global data.
_DATA_NAME_PREFIXES = ("off_", "byte_", "word_", "dword_", "qword_", "xmmword_", "unk_", "flt_", "dbl_", "stru_")


class InsnClass(Enum):
    CALL = "call"
    INDIRECT_CALL = "indirect_call"
    CONTROL_FLOW = "control_flow"
    STACK = "stack"
    REFERENCES_GLOBAL = "references_global"


class CallKind(Enum):
    DIRECT = "direct"
    INDIRECT = "indirect"


@dataclass(frozen=True)
class InstructionModel:
    """One instruction: mnemonic, operand tokens and derived class flags."""
    addr: int
    mnemonic: str
    operands: tuple[str, ...]
    text: str
    classes: frozenset[InsnClass] = frozenset()
    registers: frozenset[str] = frozenset()  # canonical registers named in operands
    prefixes: tuple[str, ...] = ()
    xref_data: tuple[int, ...] = ()

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.prefixes + (self.mnemonic,) + self.operands

    def has(self, cls: InsnClass) -> bool:
        return cls in self.classes

    def touches(self, register: str) -> bool:
        return register in self.registers


@dataclass(frozen=True)
class FunctionModel:
    start_addr: int
    end_addr: int
    name: str
    instructions: tuple[InstructionModel, ...] = ()
    address_taken: bool = False

    def contains(self, addr: int) -> bool:
        return self.start_addr <= addr < self.end_addr

    def instruction_at(self, addr: int) -> InstructionModel | None:
        for insn in self.instructions:
            if insn.addr == addr:
                return insn
        return None


@dataclass(frozen=True)
class CallsiteRef:
    binary_id: str
    addr: int
    kind: CallKind
    enclosing_function: int


@dataclass(frozen=True)
class ProgramModel:
    """A binary's functions in address order plus its data cross-references."""
    binary_id: str
    functions: tuple[FunctionModel, ...] = ()
    data_refs: dict[int, tuple[int, ...]] = field(default_factory=dict)  # code addr -> data addrs
    data_ptrs: dict[int, int] = field(default_factory=dict)  # data addr -> code addr stored there

    def function_at(self, addr: int) -> FunctionModel | None:
        """Return the function whose range contains `addr`."""
        lo, hi = 0, len(self.functions)
        while lo < hi:
            mid = (lo + hi) // 2
            fn = self.functions[mid]
            if addr < fn.start_addr:
                hi = mid
            elif addr >= fn.end_addr:
                lo = mid + 1
            else:
                return fn
        return None

    def function_starting_at(self, addr: int) -> FunctionModel | None:
        fn = self.function_at(addr)
        if fn is not None and fn.start_addr == addr:
            return fn
        return None

    def function_named(self, name: str) -> FunctionModel | None:
        for fn in self.functions:
            if fn.name == name:
                return fn
        return None

    def instructions(self) -> Iterator[InstructionModel]:
        for fn in self.functions:
            yield from fn.instructions

    def address_taken_functions(self) -> list[FunctionModel]:
        return [fn for fn in self.functions if fn.address_taken]


@dataclass
class DirectPairs:
    """Direct-call pairs plus the calls whose target is not a function start."""
    pairs: list[tuple[CallsiteRef, int]]
    skipped: list[CallsiteRef] = field(default_factory=list)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def _parse_hex(value, what: str, line_no: int) -> int:
    if isinstance(value, int):
        return value
    try:
        return int(str(value), 16)
    except ValueError as e:
        raise ParseError(f"bad {what} address {value!r}", line_no) from e


def _is_stack_operand(operands: tuple[str, ...]) -> bool:
    """True if any memory operand is addressed off rsp or rbp."""
    depth = 0
    for tok in operands:
        if tok == "[":
            depth += 1
        elif tok == "]":
            depth = max(depth - 1, 0)
        elif depth and canonical_register(tok) in STACK_POINTERS:
            return True
    return False


def _is_indirect_call_operand(operands: tuple[str, ...]) -> bool:
    for tok in operands:
        low = tok.lower()
        if low in SIZE_KEYWORDS or low in SEGMENT_REGISTERS or tok == ":":
            continue
        return tok == "[" or canonical_register(tok) is not None or _looks_like_data_name(tok)
    return False


def _looks_like_data_name(tok: str) -> bool:
    low = tok.lower()
    return low.startswith(_DATA_NAME_PREFIXES)


def make_instruction(addr: int, text: str, xref_data: Iterable[int] = ()) -> InstructionModel:
    """Tokenize one instruction and compute its class flags."""
    tokens = tokenize(text)
    if not tokens:
        raise ParseError(f"empty instruction text at {addr:#x}")

    i = 0
    while i < len(tokens) - 1 and tokens[i].lower() in PREFIXES:
        i += 1
    prefixes = tuple(tokens[:i])
    mnemonic = tokens[i]
    operands = tuple(tokens[i + 1:])
    xrefs = tuple(xref_data)

    registers = frozenset(r for r in (canonical_register(t) for t in operands) if r is not None)

    classes: set[InsnClass] = set()
    low = mnemonic.lower()
    if is_control_flow(low):
        classes.add(InsnClass.CONTROL_FLOW)
    if low in CALL_MNEMONICS:
        classes.add(InsnClass.CALL)
        if _is_indirect_call_operand(operands):
            classes.add(InsnClass.INDIRECT_CALL)
    if low in STACK_MNEMONICS or _is_stack_operand(operands):
        classes.add(InsnClass.STACK)
    if xrefs or any(_looks_like_data_name(t) for t in operands):
        classes.add(InsnClass.REFERENCES_GLOBAL)

    return InstructionModel(
        addr=addr,
        mnemonic=mnemonic,
        operands=operands,
        text=text,
        classes=frozenset(classes),
        registers=registers,
        prefixes=prefixes,
        xref_data=xrefs,
    )


@dataclass
class _FunctionBuilder:
    start: int
    name: str | None = None
    end: int | None = None
    instructions: list[InstructionModel] = field(default_factory=list)


def parse_program(lines: Iterable[str]) -> ProgramModel:
    """
    Parse a normalized-disassembly JSONL stream into a ProgramModel.

    Raises:
        ParseError: on malformed JSON or missing fields (with the line number)
        ModelError: on overlapping functions or mixed binary ids
    """
    binary_id: str | None = None
    builders: dict[int, _FunctionBuilder] = {}
    data_refs: dict[int, tuple[int, ...]] = {}
    data_ptrs: dict[int, int] = {}

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue

        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line_no) from e
        if not isinstance(data, dict) or "bin" not in data:
            raise ParseError("record must be an object with a 'bin' field", line_no)

        if binary_id is None:
            binary_id = str(data["bin"])
        elif data["bin"] != binary_id:
            raise ModelError(f"line {line_no}: stream mixes binaries {binary_id!r} and {data['bin']!r}")

        if "func_start" in data:
            start = _parse_hex(data["func_start"], "function", line_no)
            b = builders.setdefault(start, _FunctionBuilder(start=start))
            b.name = str(data.get("name") or f"sub_{start:X}")
            if "func_end" in data:
                b.end = _parse_hex(data["func_end"], "function end", line_no)
            continue

        if "data_ptr" in data:
            try:
                data_ptrs[_parse_hex(data["data_ptr"], "data", line_no)] = _parse_hex(data["target"], "target", line_no)
            except KeyError as e:
                raise ParseError("data_ptr record without 'target'", line_no) from e
            continue

        try:
            func = _parse_hex(data["func"], "function", line_no)
            func_end = _parse_hex(data["func_end"], "function end", line_no)
            addr = _parse_hex(data["addr"], "instruction", line_no)
            text = data["text"]
        except KeyError as e:
            raise ParseError(f"instruction record missing field {e.args[0]!r}", line_no) from e
        if not isinstance(text, str) or not text.strip():
            raise ParseError("instruction text must be a non-empty string", line_no)
        if not func <= addr < func_end:
            raise ParseError(f"instruction {addr:#x} outside its function [{func:#x}, {func_end:#x})", line_no)

        xrefs = tuple(_parse_hex(x, "xref", line_no) for x in data.get("xref_data") or ())
        if xrefs:
            data_refs[addr] = xrefs

        b = builders.setdefault(func, _FunctionBuilder(start=func))
        if b.end is not None and b.end != func_end:
            raise ModelError(f"line {line_no}: function {func:#x} has conflicting ends {b.end:#x} and {func_end:#x}")
        b.end = func_end
        try:
            b.instructions.append(make_instruction(addr, text.strip(), xrefs))
        except ParseError as e:
            raise ParseError(str(e), line_no) from e

    functions = []
    for start in sorted(builders):
        b = builders[start]
        insns = sorted(b.instructions, key=lambda ins: ins.addr)
        for prev, cur in zip(insns, insns[1:]):
            if prev.addr == cur.addr:
                raise ModelError(f"duplicate instruction at {cur.addr:#x}")
        functions.append(FunctionModel(
            start_addr=start,
            end_addr=b.end if b.end is not None else start,
            name=b.name or f"sub_{start:X}",
            instructions=tuple(insns),
        ))

    for prev, cur in zip(functions, functions[1:]):
        if cur.start_addr < prev.end_addr:
            raise ModelError(
                f"functions {prev.name} [{prev.start_addr:#x}, {prev.end_addr:#x}) and "
                f"{cur.name} [{cur.start_addr:#x}, {cur.end_addr:#x}) overlap"
            )

    program = ProgramModel(
        binary_id=binary_id or "",
        functions=tuple(functions),
        data_refs=data_refs,
        data_ptrs=data_ptrs,
    )
    return mark_address_taken(program)


def dump_program(p: ProgramModel) -> Iterator[str]:
    """Serialize a ProgramModel back to normalized JSONL lines."""
    for fn in p.functions:
        yield json.dumps({
            "bin": p.binary_id,
            "func_start": hex(fn.start_addr),
            "func_end": hex(fn.end_addr),
            "name": fn.name,
        })
        for insn in fn.instructions:
            yield json.dumps({
                "bin": p.binary_id,
                "func": hex(fn.start_addr),
                "func_end": hex(fn.end_addr),
                "addr": hex(insn.addr),
                "text": insn.text,
                "xref_data": [hex(x) for x in insn.xref_data],
            })
    for data_addr, target in sorted(p.data_ptrs.items()):
        yield json.dumps({"bin": p.binary_id, "data_ptr": hex(data_addr), "target": hex(target)})


def _call_target(p: ProgramModel, insn: InstructionModel) -> int | None:
    """Resolve the operand of a direct call to an address (or None)."""
    for tok in insn.operands:
        if tok.lower() in SIZE_KEYWORDS:
            continue
        if is_number(tok):
            return parse_number(tok)
        if tok.lower().startswith("sub_"):
            try:
                return int(tok[4:], 16)
            except ValueError:
                pass
        fn = p.function_named(tok)
        return fn.start_addr if fn is not None else None
    return None


def _callsite(p: ProgramModel, fn: FunctionModel, insn: InstructionModel) -> CallsiteRef:
    kind = CallKind.INDIRECT if insn.has(InsnClass.INDIRECT_CALL) else CallKind.DIRECT
    return CallsiteRef(binary_id=p.binary_id, addr=insn.addr, kind=kind, enclosing_function=fn.start_addr)


def extract_direct_pairs(p: ProgramModel) -> DirectPairs:
    """
    Collect (callsite, callee start) for every direct call.

    Calls whose target is not the start of a known function (mid-function
    targets, unresolved imports) are dropped and reported in `skipped`.
    """
    result = DirectPairs(pairs=[])
    for fn in p.functions:
        for insn in fn.instructions:
            if not insn.has(InsnClass.CALL) or insn.has(InsnClass.INDIRECT_CALL):
                continue
            ref = _callsite(p, fn, insn)
            target = _call_target(p, insn)
            if target is not None and p.function_starting_at(target) is not None:
                result.pairs.append((ref, target))
            else:
                result.skipped.append(ref)
    result.pairs.sort(key=lambda pair: pair[0].addr)
    return result


def _constant_operands(insn: InstructionModel, names: dict[str, int]) -> Iterator[int]:
    for tok in insn.operands:
        if is_number(tok):
            yield parse_number(tok)
        elif tok.lower().startswith("sub_"):
            try:
                yield int(tok[4:], 16)
            except ValueError:
                continue
        elif tok in names:
            yield names[tok]


def mark_address_taken(p: ProgramModel) -> ProgramModel:
    """
    Flag functions whose address is materialized anywhere in the binary.

    A start address counts when it appears as a constant operand of a
    non-control-flow instruction, as a data cross-reference, or as a code
    pointer stored in data. Recomputed from scratch, so applying it twice
    gives the same flags.
    """
    starts = {fn.start_addr for fn in p.functions}
    names = {fn.name: fn.start_addr for fn in p.functions}
    taken: set[int] = set()

    for insn in p.instructions():
        taken.update(x for x in insn.xref_data if x in starts)
        if insn.has(InsnClass.CONTROL_FLOW):
            continue
        taken.update(c for c in _constant_operands(insn, names) if c in starts)
    taken.update(t for t in p.data_ptrs.values() if t in starts)

    functions = tuple(
        dataclasses.replace(fn, address_taken=fn.start_addr in taken)
        for fn in p.functions
    )
    return dataclasses.replace(p, functions=functions)


def list_callsites(p: ProgramModel) -> list[CallsiteRef]:
    """Every call instruction of `p`, direct and indirect, sorted by address."""
    return [
        _callsite(p, fn, insn)
        for fn in p.functions
        for insn in fn.instructions
        if insn.has(InsnClass.CALL)
    ]


def list_indirect_callsites(p: ProgramModel) -> list[CallsiteRef]:
    """The instructions flagged INDIRECT_CALL, sorted by address."""
    return [cs for cs in list_callsites(p) if cs.kind is CallKind.INDIRECT]


def require_function(p: ProgramModel, addr: int) -> FunctionModel:
    fn = p.function_at(addr)
    if fn is None:
        raise SliceError(f"{p.binary_id}: address {addr:#x} is not inside any function")
    return fn
