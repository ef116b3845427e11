"""Tests for disassembly ingest."""

import json

import pytest

from cgforge.errors import ModelError, ParseError, SliceError
from cgforge.ingest import (
    CallKind,
    InsnClass,
    dump_program,
    extract_direct_pairs,
    list_callsites,
    list_indirect_callsites,
    make_instruction,
    mark_address_taken,
    parse_program,
    require_function,
)


class TestMakeInstruction:
    def test_direct_call(self):
        insn = make_instruction(0x10, "call sub_401000")
        assert insn.has(InsnClass.CALL)
        assert insn.has(InsnClass.CONTROL_FLOW)
        assert not insn.has(InsnClass.INDIRECT_CALL)

    @pytest.mark.parametrize("text", [
        "call rax",
        "call r11",
        "call qword ptr [rbx+0x8]",
        "call qword ptr cs:off_604018",
        "call cs:off_604018",
    ])
    def test_indirect_call_forms(self, text):
        insn = make_instruction(0x10, text)
        assert insn.has(InsnClass.INDIRECT_CALL)

    def test_stack_by_mnemonic_and_operand(self):
        assert make_instruction(0, "push rbp").has(InsnClass.STACK)
        assert make_instruction(0, "mov qword ptr [rbp-0x8], rdi").has(InsnClass.STACK)
        assert make_instruction(0, "mov rax, [rsp+0x10]").has(InsnClass.STACK)
        assert not make_instruction(0, "mov rbp, rsp").has(InsnClass.STACK)

    def test_registers_are_canonical(self):
        insn = make_instruction(0, "mov edi, r8d")
        assert insn.registers == frozenset({"rdi", "r8"})
        assert insn.touches("rdi")

    def test_prefix_split_from_mnemonic(self):
        insn = make_instruction(0, "rep stosq")
        assert insn.prefixes == ("rep",)
        assert insn.mnemonic == "stosq"
        assert insn.tokens == ("rep", "stosq")

    def test_global_reference_by_xref_or_name(self):
        assert make_instruction(0, "mov rax, [rip+0x10]", [0x604000]).has(InsnClass.REFERENCES_GLOBAL)
        assert make_instruction(0, "mov rax, qword_604000").has(InsnClass.REFERENCES_GLOBAL)
        assert not make_instruction(0, "mov rax, rbx").has(InsnClass.REFERENCES_GLOBAL)

    def test_empty_text_raises(self):
        with pytest.raises(ParseError):
            make_instruction(0, "   ")


class TestParseProgram:
    def test_functions_in_address_order(self, toy_program):
        assert [fn.start_addr for fn in toy_program.functions] == [0x1000, 0x1100, 0x1200, 0x1300]
        assert toy_program.binary_id == "toy"
        assert toy_program.functions[0].name == "main"

    def test_function_at(self, toy_program):
        assert toy_program.function_at(0x1009).name == "main"
        assert toy_program.function_at(0x1020) is None
        assert toy_program.function_at(0x0FFF) is None
        assert toy_program.function_starting_at(0x1100).name == "sub_1100"
        assert toy_program.function_starting_at(0x1101) is None

    def test_address_taken(self, toy_program):
        taken = [fn.start_addr for fn in toy_program.address_taken_functions()]
        assert taken == [0x1200, 0x1300]

    def test_data_refs_recorded(self, toy_program):
        assert toy_program.data_refs == {0x1200: (0x5000,)}
        assert toy_program.data_ptrs == {0x5008: 0x1300}

    def test_invalid_json_reports_line(self, toy_lines):
        lines = toy_lines[:3] + ["{not json"] + toy_lines[3:]
        with pytest.raises(ParseError) as exc:
            parse_program(lines)
        assert exc.value.line_no == 4

    def test_missing_field(self):
        line = json.dumps({"bin": "x", "func": "0x10", "addr": "0x10", "text": "ret"})
        with pytest.raises(ParseError, match="func_end"):
            parse_program([line])

    def test_instruction_outside_function(self):
        line = json.dumps({"bin": "x", "func": "0x10", "func_end": "0x20", "addr": "0x30", "text": "ret"})
        with pytest.raises(ParseError, match="outside"):
            parse_program([line])

    def test_overlapping_functions(self):
        lines = [
            json.dumps({"bin": "x", "func": "0x10", "func_end": "0x30", "addr": "0x10", "text": "ret"}),
            json.dumps({"bin": "x", "func": "0x20", "func_end": "0x40", "addr": "0x20", "text": "ret"}),
        ]
        with pytest.raises(ModelError, match="overlap"):
            parse_program(lines)

    def test_mixed_binaries(self, toy_lines):
        other = json.dumps({"bin": "other", "func": "0x9000", "func_end": "0x9010", "addr": "0x9000", "text": "ret"})
        with pytest.raises(ModelError, match="mixes"):
            parse_program(toy_lines + [other])

    def test_dump_round_trip(self, toy_program):
        again = parse_program(list(dump_program(toy_program)))
        assert again == toy_program


class TestCallsites:
    def test_direct_pairs(self, toy_program):
        pairs = extract_direct_pairs(toy_program)
        assert len(pairs) == 1
        ref, callee = pairs[0]
        assert (ref.addr, callee, ref.enclosing_function) == (0x1009, 0x1100, 0x1000)
        assert ref.kind is CallKind.DIRECT
        assert pairs.skipped == []

    def test_mid_function_target_skipped(self):
        lines = [
            json.dumps({"bin": "x", "func": "0x10", "func_end": "0x20", "addr": "0x10", "text": "call 0x34"}),
            json.dumps({"bin": "x", "func": "0x30", "func_end": "0x40", "addr": "0x30", "text": "nop"}),
            json.dumps({"bin": "x", "func": "0x30", "func_end": "0x40", "addr": "0x34", "text": "ret"}),
        ]
        pairs = extract_direct_pairs(parse_program(lines))
        assert len(pairs) == 0
        assert [r.addr for r in pairs.skipped] == [0x10]

    def test_list_callsites(self, toy_program):
        sites = list_callsites(toy_program)
        assert [(cs.addr, cs.kind) for cs in sites] == [(0x1009, CallKind.DIRECT), (0x1018, CallKind.INDIRECT)]
        assert [cs.addr for cs in list_indirect_callsites(toy_program)] == [0x1018]

    def test_mark_address_taken_idempotent(self, toy_program):
        assert mark_address_taken(mark_address_taken(toy_program)) == toy_program

    def test_call_target_is_not_address_taking(self, toy_program):
        assert not toy_program.function_starting_at(0x1100).address_taken

    def test_require_function(self, toy_program):
        assert require_function(toy_program, 0x1105).start_addr == 0x1100
        with pytest.raises(SliceError):
            require_function(toy_program, 0x2000)
