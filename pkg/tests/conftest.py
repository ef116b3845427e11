"""Pytest configuration and fixtures."""

import json

import pytest

from cgforge.config import Config
from cgforge.corpus import CorpusConfig, build_corpus
from cgforge.ingest import parse_program
from cgforge.matcher import ArchConfig


def _toy_lines() -> list[str]:
    """
    main       0x1000  direct call to 0x1100, lea of 0x1200, indirect call
    sub_1100   0x1100  one argument, returns
    sub_1200   0x1200  reads a global
    sub_1300   0x1300  only referenced from data
    """
    funcs = [
        ("main", 0x1000, 0x1020, [
            (0x1000, "push rbp"),
            (0x1001, "mov rbp, rsp"),
            (0x1004, "mov edi, 0x1"),
            (0x1009, "call sub_1100"),
            (0x100E, "mov rbx, rax"),
            (0x1011, "lea rax, sub_1200"),
            (0x1018, "call rax"),
            (0x101A, "xor ecx, ecx"),
            (0x101C, "pop rbp"),
            (0x101D, "ret"),
        ]),
        ("sub_1100", 0x1100, 0x1110, [
            (0x1100, "mov eax, edi"),
            (0x1102, "add eax, 0x1"),
            (0x1105, "ret"),
        ]),
        ("sub_1200", 0x1200, 0x1210, [
            (0x1200, "mov r10, qword ptr [rip+0x3e00]"),
            (0x1207, "ret"),
        ]),
        ("sub_1300", 0x1300, 0x1310, [
            (0x1300, "xor r11d, r11d"),
            (0x1303, "ret"),
        ]),
    ]
    lines = []
    for name, start, end, insns in funcs:
        lines.append(json.dumps({"bin": "toy", "func_start": hex(start), "func_end": hex(end), "name": name}))
        for addr, text in insns:
            record = {"bin": "toy", "func": hex(start), "func_end": hex(end), "addr": hex(addr), "text": text}
            if addr == 0x1200:
                record["xref_data"] = ["0x5000"]
            lines.append(json.dumps(record))
    lines.append(json.dumps({"bin": "toy", "data_ptr": "0x5008", "target": "0x1300"}))
    return lines


@pytest.fixture
def toy_lines():
    return _toy_lines()


@pytest.fixture
def toy_program():
    return parse_program(_toy_lines())


@pytest.fixture
def toy_file(tmp_path):
    path = tmp_path / "toy.jsonl"
    path.write_text("\n".join(_toy_lines()) + "\n")
    return path


@pytest.fixture
def tiny_arch():
    """Small enough for finite differences."""
    return ArchConfig(
        slice_len=3, embed_dim=2, hidden_sizes=(4,), feature_dim=3,
        classifier_sizes=(4,), dropout=0.0, batchnorm=True, dtype="float64",
    )


SMALL_CORPUS = CorpusConfig(binaries=6, callees=6, direct_callers=8, indirect_callers=3, max_args=3, noise=1)


def small_config(**pipeline) -> Config:
    """Desk-scale settings: tiny embedder and matcher, a handful of epochs."""
    return Config.from_dict({
        "seed": 3,
        "embed": {"dim": 8, "epochs": 2, "negative": 3},
        "arch": {"slice_len": 16, "hidden_sizes": [16], "feature_dim": 8, "classifier_sizes": [8], "dropout": 0.0},
        "train": {"batch_size": 32, "epochs": 2, "learning_rate": 0.005},
        "pipeline": {"split": [0.5, 0.25, 0.25], "finetune_epochs": 2, "embed_finetune_epochs": 1, **pipeline},
        "corpus": {
            "binaries": SMALL_CORPUS.binaries, "callees": SMALL_CORPUS.callees,
            "direct_callers": SMALL_CORPUS.direct_callers, "indirect_callers": SMALL_CORPUS.indirect_callers,
            "max_args": SMALL_CORPUS.max_args, "noise": SMALL_CORPUS.noise,
        },
    })


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(out, SMALL_CORPUS, seed=11)
    return out