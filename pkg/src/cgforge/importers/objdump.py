"""
Import `objdump -d -M intel --no-show-raw-insn` listings.

    0000000000401126 <main>:
      401126:	push   rbp
      40112e:	call   401106 <add>
      401133:	lea    rax,[rip+0x2ee6]        # 404020 <handlers>
      40113a:	call   QWORD PTR [rip+0x2ee0]        # 404020 <handlers>

Direct branch targets become sub_/loc_ names so that the symbolizer sees the
same shapes as in IDA exports. The address in a trailing `# addr <sym>`
comment is recorded as a data cross-reference. objdump does not print the
last instruction's length, so a function ends one byte after its last
instruction.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

from ..errors import ParseError
from ..x86 import CALL_MNEMONICS, PREFIXES, is_control_flow

log = logging.getLogger(__name__)

_HEADER_RE = re.compile(r"^([0-9a-fA-F]+) <([^>]+)>:\s*$")
_INSN_RE = re.compile(r"^\s+([0-9a-fA-F]+):\s+(.*?)\s*$")
_COMMENT_RE = re.compile(r"\s*#\s*([0-9a-fA-F]+)(?:\s+<[^>]*>)?\s*$")
_TARGET_RE = re.compile(r"^([0-9a-fA-F]+)(?:\s+<[^>]*>)?$")


@dataclass
class _Function:
    name: str
    start: int
    insns: list[tuple[int, str, list[int]]] = field(default_factory=list)


def _normalize(text: str) -> tuple[str, list[int]] | None:
    """Rewrite one instruction; None for lines objdump could not decode."""
    xrefs = []
    m = _COMMENT_RE.search(text)
    if m:
        xrefs.append(int(m.group(1), 16))
        text = text[:m.start()]
    if "(bad)" in text:
        return None

    parts = text.split(None, 1)
    i = 0
    while i < len(parts) - 1 and parts[i].lower() in PREFIXES:
        rest = parts[i + 1].split(None, 1)
        parts = parts[:i + 1] + rest
        i += 1
    mnemonic = parts[i].lower()
    prefix = " ".join(p.lower() for p in parts[:i])
    operands = parts[i + 1] if len(parts) > i + 1 else ""

    target = _TARGET_RE.match(operands.strip())
    if target and is_control_flow(mnemonic):
        kind = "sub" if mnemonic in CALL_MNEMONICS else "loc"
        operands = f"{kind}_{int(target.group(1), 16):X}"
    else:
        operands = re.sub(r"\s*<[^>]*>", "", operands).lower().replace(",", ", ")

    head = f"{prefix} {mnemonic}" if prefix else mnemonic
    return (f"{head} {operands}" if operands else head), xrefs


def _functions(lines: Iterable[str]) -> Iterator[_Function]:
    current: _Function | None = None
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        header = _HEADER_RE.match(line)
        if header:
            if current is not None:
                yield current
            current = _Function(name=header.group(2), start=int(header.group(1), 16))
            continue
        m = _INSN_RE.match(line)
        if m is None or not m.group(2) or m.group(2) == "...":
            continue
        if current is None:
            raise ParseError("instruction before any function header", line_no)
        normalized = _normalize(m.group(2))
        if normalized is None:
            log.debug("skipping undecodable instruction", extra={"line": line_no})
            continue
        current.insns.append((int(m.group(1), 16), *normalized))
    if current is not None:
        yield current


def import_objdump(lines: Iterable[str], binary_id: str) -> Iterator[str]:
    """
    Yield normalized JSONL records for an objdump listing.

    Raises:
        ParseError: if an instruction appears before the first function header
    """
    for fn in _functions(lines):
        if not fn.insns:
            continue
        end = fn.insns[-1][0] + 1
        yield json.dumps({"bin": binary_id, "func_start": hex(fn.start), "func_end": hex(end), "name": fn.name})
        for addr, text, xrefs in fn.insns:
            record = {"bin": binary_id, "func": hex(fn.start), "func_end": hex(end), "addr": hex(addr), "text": text}
            if xrefs:
                record["xref_data"] = [hex(x) for x in xrefs]
            yield json.dumps(record)
