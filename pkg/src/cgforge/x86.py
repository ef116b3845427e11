"""
x86-64 tables shared by the parser, the slicer and the symbolizer.

Registers are canonicalized to their 64-bit (or xmm/st) names so that
`edi`, `di` and `dil` all count as uses of `rdi`.
"""

_GPR_FAMILIES = {
    "rax": ("rax", "eax", "ax", "al", "ah"),
    "rbx": ("rbx", "ebx", "bx", "bl", "bh"),
    "rcx": ("rcx", "ecx", "cx", "cl", "ch"),
    "rdx": ("rdx", "edx", "dx", "dl", "dh"),
    "rsi": ("rsi", "esi", "si", "sil"),
    "rdi": ("rdi", "edi", "di", "dil"),
    "rbp": ("rbp", "ebp", "bp", "bpl"),
    "rsp": ("rsp", "esp", "sp", "spl"),
    "rip": ("rip", "eip"),
}


def _build_aliases() -> dict[str, str]:
    aliases: dict[str, str] = {}
    for canonical, names in _GPR_FAMILIES.items():
        for name in names:
            aliases[name] = canonical
    for n in range(8, 16):
        base = f"r{n}"
        for suffix in ("", "d", "w", "b", "l"):
            aliases[base + suffix] = base
    for n in range(32):
        for prefix in ("xmm", "ymm", "zmm"):
            aliases[f"{prefix}{n}"] = f"xmm{n}"
    for n in range(8):
        aliases[f"st{n}"] = f"st{n}"
        aliases[f"st({n})"] = f"st{n}"
    aliases["st"] = "st0"
    return aliases


REGISTER_ALIASES: dict[str, str] = _build_aliases()

STACK_POINTERS = frozenset({"rsp", "rbp"})

STACK_MNEMONICS = frozenset({"push", "pop", "leave", "enter", "pushq", "popq", "leaveq"})

CALL_MNEMONICS = frozenset({"call", "callq"})

RETURN_MNEMONICS = frozenset({"ret", "retn", "retq", "retf", "iret", "iretq"})

LOOP_MNEMONICS = frozenset({"loop", "loope", "loopne", "loopz", "loopnz", "jecxz", "jrcxz"})

# Printed before the mnemonic by objdump and IDA.
PREFIXES = frozenset({
    "lock", "rep", "repe", "repz", "repne", "repnz", "bnd", "notrack", "data16", "addr32",
})

SEGMENT_REGISTERS = frozenset({"cs", "ds", "es", "fs", "gs", "ss"})

SIZE_KEYWORDS = frozenset({
    "byte", "word", "dword", "qword", "tbyte", "oword", "xmmword", "ymmword", "zmmword",
    "fword", "ptr", "short", "near", "far",
})


def canonical_register(token: str) -> str | None:
    """Map a register token to its canonical name, or None if it is not one."""
    return REGISTER_ALIASES.get(token.lower())


def is_control_flow(mnemonic: str) -> bool:
    m = mnemonic.lower()
    return (
        m in CALL_MNEMONICS
        or m in RETURN_MNEMONICS
        or m in LOOP_MNEMONICS
        or m.startswith("j")
    )
