"""Tests for the objdump importer."""

import json

import pytest

from cgforge.errors import ParseError
from cgforge.importers import import_objdump
from cgforge.ingest import CallKind, extract_direct_pairs, list_callsites, parse_program

LISTING = """
a.out:     file format elf64-x86-64


Disassembly of section .text:

0000000000401106 <add>:
  401106:\tpush   rbp
  401107:\tmov    rbp,rsp
  40110a:\tmov    DWORD PTR [rbp-0x4],edi
  40110d:\tmov    eax,DWORD PTR [rbp-0x4]
  401110:\tpop    rbp
  401111:\tret

0000000000401126 <main>:
  401126:\tpush   rbp
  401127:\tmov    edi,0x1
  40112c:\tcall   401106 <add>
  401131:\ttest   eax,eax
  401133:\tje     40113f <main+0x19>
  401135:\tmov    rax,QWORD PTR [rip+0x2ee4]        # 404020 <handlers>
  40113c:\tcall   rax
  40113e:\t(bad)
  40113f:\trep stos QWORD PTR es:[rdi],rax
  401142:\tpop    rbp
  401143:\tret
"""


@pytest.fixture
def records():
    return [json.loads(r) for r in import_objdump(LISTING.splitlines(), "a.out")]


class TestImportObjdump:
    def test_function_headers(self, records):
        headers = [r for r in records if "func_start" in r]
        assert [(h["name"], h["func_start"], h["func_end"]) for h in headers] == [
            ("add", "0x401106", "0x401112"),
            ("main", "0x401126", "0x401144"),
        ]

    def test_direct_targets_are_named(self, records):
        texts = {r["addr"]: r["text"] for r in records if "text" in r}
        assert texts["0x40112c"] == "call sub_401106"
        assert texts["0x401133"] == "je loc_40113F"

    def test_operands_normalized(self, records):
        texts = {r["addr"]: r["text"] for r in records if "text" in r}
        assert texts["0x401107"] == "mov rbp, rsp"
        assert texts["0x40110a"] == "mov dword ptr [rbp-0x4], edi"
        assert texts["0x40113f"] == "rep stos qword ptr es:[rdi], rax"

    def test_comment_becomes_xref(self, records):
        insn = next(r for r in records if r.get("addr") == "0x401135")
        assert insn["text"] == "mov rax, qword ptr [rip+0x2ee4]"
        assert insn["xref_data"] == ["0x404020"]

    def test_bad_lines_skipped(self, records):
        assert all(r.get("addr") != "0x40113e" for r in records)

    def test_parses_into_a_program(self, records):
        program = parse_program(json.dumps(r) for r in records)
        assert [fn.name for fn in program.functions] == ["add", "main"]
        kinds = [cs.kind for cs in list_callsites(program)]
        assert kinds == [CallKind.DIRECT, CallKind.INDIRECT]
        assert [(ref.addr, callee) for ref, callee in extract_direct_pairs(program)] == [(0x40112C, 0x401106)]

    def test_instruction_before_header(self):
        with pytest.raises(ParseError):
            list(import_objdump(["  401000:\tret"], "x"))

    def test_empty_listing(self):
        assert list(import_objdump([], "x")) == []
