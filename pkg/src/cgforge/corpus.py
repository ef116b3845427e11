"""
Synthetic corpus generator.

Every generated binary has:
- callees with a signature (0-6 integer arguments, void or not). They spill
  their argument registers in the prologue and, when non-void, set rax
  before returning.
- one init function that stores the address of every address-taken callee
  into a data slot.
- direct callers ("call sub_X") and indirect callers (a function pointer
  loaded from a data slot, then "call rax" / "call r11" /
  "call qword ptr [rbx+0x8]"). Each caller sets up its arguments, and uses
  rax after the call iff its signature is non-void.
- noise confined to r10, r11 and nop.

Ground truth is signature compatibility: a callsite and an address-taken
callee match iff argument count and void-ness agree. truth.jsonl lists every
compatible pair; indirect entries are the icall positives, and the whole
file is the exclusion set for negative sampling.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

TRUTH_FILE = "truth.jsonl"

TEXT_BASE = 0x401000
DATA_BASE = 0x604000
RODATA_BASE = 0x606000
GLOBALS_BASE = 0x608000

_ARG64 = ("rdi", "rsi", "rdx", "rcx", "r8", "r9")
_ARG32 = ("edi", "esi", "edx", "ecx", "r8d", "r9d")
_SAVED = ("rbx", "r12", "r13", "r14", "r15")
_STRINGS = ("aUsage", "aErrorS", "aD", "aOk", "aFileNotFound", "aInvalidArgume", "aS_0", "aWarning")
_STRING_OPERAND = re.compile(r"\ba[A-Z]")


@dataclass(frozen=True)
class CorpusConfig:
    binaries: int = 50
    callees: int = 12
    address_taken: float = 0.75
    direct_callers: int = 40
    indirect_callers: int = 6
    max_args: int = 6
    noise: int = 3

    def __post_init__(self):
        if self.binaries < 1 or self.callees < 1:
            raise ConfigError("a corpus needs at least one binary and one callee")
        if not 0.0 < self.address_taken <= 1.0:
            raise ConfigError(f"address_taken must be in (0, 1], got {self.address_taken}")
        if not 0 <= self.max_args <= len(_ARG64):
            raise ConfigError(f"max_args must be in [0, {len(_ARG64)}], got {self.max_args}")
        if min(self.direct_callers, self.indirect_callers, self.noise) < 0:
            raise ConfigError("caller and noise counts must be non-negative")


@dataclass(frozen=True)
class Signature:
    nargs: int
    returns: bool


@dataclass
class _Insn:
    text: str
    xrefs: tuple[int, ...] = ()
    label: str | None = None  # placeholder resolved to an address after layout


@dataclass
class _Func:
    name: str
    body: list[_Insn]
    start: int = 0
    addrs: list[int] = field(default_factory=list)
    end: int = 0


@dataclass
class CorpusSummary:
    directory: Path
    binaries: list[str]
    direct_callsites: int = 0
    indirect_callsites: int = 0
    indirect_positives: int = 0


def insn_length(text: str) -> int:
    """Plausible encoded length; only needs to be deterministic."""
    mnemonic, _, operands = text.partition(" ")
    if mnemonic in ("push", "pop", "ret", "leave", "nop"):
        return 1 if not operands.startswith("r1") else 2
    if mnemonic == "call":
        return 5 if operands.startswith(("sub_", "0x")) else (3 if "[" in operands else 2)
    if mnemonic.startswith("j"):
        return 2
    if "rip" in operands or "cs:" in operands or "sub_" in operands or _STRING_OPERAND.search(operands):
        return 7
    if "[" in operands:
        return 4
    return 3


class _BinaryBuilder:
    def __init__(self, binary_id: str, cfg: CorpusConfig, rng: np.random.Generator):
        self.binary_id = binary_id
        self.cfg = cfg
        self.rng = rng
        self.next_global = GLOBALS_BASE

    def choice(self, options):
        return options[int(self.rng.integers(len(options)))]

    def global_slot(self) -> int:
        addr = self.next_global
        self.next_global += 8
        return addr

    def noise(self) -> list[_Insn]:
        out = []
        for _ in range(int(self.rng.integers(0, self.cfg.noise + 1))):
            k = int(self.rng.integers(6))
            if k == 0:
                out.append(_Insn("nop"))
            elif k == 1:
                out.append(_Insn("mov r10, r11"))
            elif k == 2:
                out.append(_Insn(f"add r11, 0x{int(self.rng.integers(1, 64)):x}"))
            elif k == 3:
                out.append(_Insn("xor r10d, r10d"))
            elif k == 4:
                out.append(_Insn("imul r10, r11"))
            else:
                slot = self.global_slot()
                out.append(_Insn(f"mov r11, qword ptr [rip+0x{slot & 0xFFF:x}]", (slot,)))
        return out

    def arg_setup(self, i: int) -> _Insn:
        k = int(self.rng.integers(5))
        if k == 0:
            return _Insn(f"mov {_ARG32[i]}, 0x{int(self.rng.integers(0, 256)):x}")
        if k == 1:
            return _Insn(f"mov {_ARG64[i]}, {self.choice(_SAVED)}")
        if k == 2:
            return _Insn(f"lea {_ARG64[i]}, [rbp-0x{8 * int(self.rng.integers(1, 8)):x}]")
        if k == 3:
            return _Insn(f"mov {_ARG64[i]}, qword ptr [rbp-0x{8 * int(self.rng.integers(1, 8)):x}]")
        return _Insn(f"lea {_ARG64[i]}, {self.choice(_STRINGS)}", (RODATA_BASE + 16 * int(self.rng.integers(64)),))

    def arg_spill(self, i: int) -> _Insn:
        k = int(self.rng.integers(3))
        if k == 0:
            return _Insn(f"mov qword ptr [rbp-0x{8 * (i + 1):x}], {_ARG64[i]}")
        if k == 1:
            return _Insn(f"mov dword ptr [rbp-0x{4 * (i + 1) + 0x10:x}], {_ARG32[i]}")
        return _Insn(f"mov {_SAVED[i % len(_SAVED)]}, {_ARG64[i]}")

    def return_value(self) -> _Insn:
        return self.choice([
            _Insn("mov eax, 0x1"),
            _Insn("xor eax, eax"),
            _Insn("mov rax, qword ptr [rbp-0x8]"),
            _Insn("lea rax, [rbx+0x8]"),
        ])

    def callee(self, sig: Signature) -> list[_Insn]:
        body = [_Insn("push rbp"), _Insn("mov rbp, rsp")]
        body += [self.arg_spill(i) for i in range(sig.nargs)]
        body += self.noise()
        if self.rng.random() < 0.3:
            body += [_Insn("cmp r10, 0x0"), _Insn("jle {exit}", label="exit")]
            body += self.noise()
        if sig.returns:
            body.append(self.return_value())
        body.append(_Insn("pop rbp", label="exit"))
        body.append(_Insn("ret"))
        return body

    def caller(self, sig: Signature, call: list[_Insn]) -> list[_Insn]:
        body = [_Insn("push rbp"), _Insn("mov rbp, rsp"), _Insn("sub rsp, 0x20")]
        body += self.noise()
        body += call[:-1]  # function-pointer load, if any
        order = list(range(sig.nargs))[::-1]
        for i in order:
            body.append(self.arg_setup(i))
        body += self.noise()
        body.append(call[-1])
        if sig.returns:
            k = int(self.rng.integers(3))
            if k == 0:
                body.append(_Insn("mov qword ptr [rbp-0x8], rax"))
            elif k == 1:
                body += [_Insn("test eax, eax"), _Insn("jz {exit}", label="exit")]
            else:
                body.append(_Insn("mov ebx, eax"))
        body += self.noise()
        body.append(_Insn("leave", label="exit"))
        body.append(_Insn("ret"))
        return body

    def indirect_call(self, slot: int) -> list[_Insn]:
        k = int(self.rng.integers(3))
        if k == 0:
            return [_Insn(f"mov rax, qword ptr [rip+0x{slot & 0xFFF:x}]", (slot,)), _Insn("call rax")]
        if k == 1:
            return [_Insn(f"mov r11, cs:off_{slot:X}", (slot,)), _Insn("call r11")]
        return [_Insn(f"mov rbx, qword ptr [rip+0x{(slot - 8) & 0xFFF:x}]", (slot - 8,)),
                _Insn("call qword ptr [rbx+0x8]")]


def _layout(funcs: list[_Func]):
    addr = TEXT_BASE
    for fn in funcs:
        fn.start = addr
        fn.addrs = []
        for insn in fn.body:
            fn.addrs.append(addr)
            addr += insn_length(insn.text)
        fn.end = addr
        addr = (addr + 0xF) & ~0xF


def _resolve(fn: _Func, insn: _Insn) -> str:
    if "{" not in insn.text:
        return insn.text
    target = next(a for a, i in zip(fn.addrs, fn.body) if i.label == insn.label and "{" not in i.text)
    return insn.text.format(**{insn.label: f"loc_{target:X}"})


def generate_binary(binary_id: str, cfg: CorpusConfig, rng: np.random.Generator) -> tuple[list[str], list[dict]]:
    """Return (normalized disassembly lines, truth records) for one binary."""
    b = _BinaryBuilder(binary_id, cfg, rng)

    sigs = [Signature(int(rng.integers(0, cfg.max_args + 1)), bool(rng.random() < 0.5)) for _ in range(cfg.callees)]
    taken = rng.random(cfg.callees) < cfg.address_taken
    taken[int(rng.integers(cfg.callees))] = True
    at_ids = [i for i in range(cfg.callees) if taken[i]]
    slots = {i: DATA_BASE + 16 * n + 8 for n, i in enumerate(at_ids)}

    funcs = [_Func(name="", body=b.callee(sig)) for sig in sigs]
    _layout(funcs)  # callee addresses are needed by the callers' text

    # Placeholder names fixed after the final layout; callee addresses do not move
    # because callees come first.
    callee_start = [f.start for f in funcs]

    init = _Func(name="init_table", body=[])
    for i in at_ids:
        init.body.append(_Insn(f"lea rax, sub_{callee_start[i]:X}"))
        init.body.append(_Insn(f"mov qword ptr [rip+0x{slots[i] & 0xFFF:x}], rax", (slots[i],)))
    init.body.append(_Insn("ret"))
    funcs.append(init)

    callsites: list[tuple[int, int, Signature, str, int | None]] = []  # (func idx, body idx, sig, kind, target)
    for _ in range(cfg.direct_callers):
        target = int(rng.integers(cfg.callees))
        op = f"sub_{callee_start[target]:X}" if rng.random() < 0.8 else f"0x{callee_start[target]:x}"
        body = b.caller(sigs[target], [_Insn(f"call {op}")])
        funcs.append(_Func(name="", body=body))
        callsites.append((len(funcs) - 1, next(j for j, x in enumerate(body) if x.text.startswith("call")),
                          sigs[target], "direct", target))
    for _ in range(cfg.indirect_callers):
        target = at_ids[int(rng.integers(len(at_ids)))]
        body = b.caller(sigs[target], b.indirect_call(slots[target]))
        funcs.append(_Func(name="", body=body))
        callsites.append((len(funcs) - 1, next(j for j, x in enumerate(body) if x.text.startswith("call")),
                          sigs[target], "indirect", None))

    _layout(funcs)
    for fn in funcs:
        if not fn.name:
            fn.name = f"sub_{fn.start:X}"

    lines = []
    for fn in funcs:
        lines.append(json.dumps({"bin": binary_id, "func_start": hex(fn.start), "func_end": hex(fn.end), "name": fn.name}))
        for addr, insn in zip(fn.addrs, fn.body):
            lines.append(json.dumps({
                "bin": binary_id,
                "func": hex(fn.start),
                "func_end": hex(fn.end),
                "addr": hex(addr),
                "text": _resolve(fn, insn),
                "xref_data": [hex(x) for x in insn.xrefs],
            }))
    for i in at_ids:
        lines.append(json.dumps({"bin": binary_id, "data_ptr": hex(slots[i]), "target": hex(funcs[i].start)}))

    truth = []
    for fi, bi, sig, kind, target in callsites:
        cs = funcs[fi].addrs[bi]
        compatible = {i for i in at_ids if sigs[i] == sig}
        if target is not None:
            compatible.add(target)
        for i in sorted(compatible):
            truth.append({"bin": binary_id, "cs_addr": hex(cs), "callee_addr": hex(funcs[i].start), "kind": kind})
    return lines, truth


def build_corpus(out_dir: Path, cfg: CorpusConfig, seed: int) -> CorpusSummary:
    """Write one `<bin>.jsonl` per binary plus truth.jsonl into `out_dir`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = CorpusSummary(directory=out_dir, binaries=[])
    truth_lines = []
    for n in range(cfg.binaries):
        binary_id = f"bin{n:03d}"
        lines, truth = generate_binary(binary_id, cfg, np.random.default_rng([seed, n]))
        (out_dir / f"{binary_id}.jsonl").write_text("\n".join(lines) + "\n")
        summary.binaries.append(binary_id)
        truth_lines.extend(json.dumps(t, sort_keys=True) for t in truth)
        summary.indirect_positives += sum(t["kind"] == "indirect" for t in truth)
    summary.direct_callsites = cfg.binaries * cfg.direct_callers
    summary.indirect_callsites = cfg.binaries * cfg.indirect_callers
    (out_dir / TRUTH_FILE).write_text("\n".join(truth_lines) + ("\n" if truth_lines else ""))
    log.info("corpus written", extra={"dir": str(out_dir), "binaries": cfg.binaries,
                                      "indirect_positives": summary.indirect_positives})
    return summary
