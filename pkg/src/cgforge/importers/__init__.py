"""Converters from disassembler output to normalized JSONL."""

from .objdump import import_objdump

__all__ = ["import_objdump"]
