"""Tests for the command-line interface."""

import json
import shutil

import pytest

from cgforge.cli import build_parser, main, resolve_config
from cgforge.embedder import EmbedderConfig, save_embedder, train_embedder
from cgforge.pipeline import EMBEDDER_FILE, MATCHER_FILE
from cgforge.symbolizer import SymbolizationMode, SymbolizationPolicy, build_vocabulary
from conftest import small_config

OBJDUMP = """
0000000000401000 <f>:
  401000:\tpush   rbp
  401001:\tcall   401010 <g>
  401006:\tret

0000000000401010 <g>:
  401010:\tret
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.toml"
    small_config().dump(path)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == 0
    return out


class TestParser:
    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 1

    def test_bad_choice(self):
        with pytest.raises(SystemExit) as e:
            main(["slice", "x.jsonl", "--policy", "medium"])
        assert e.value.code == 1

    def test_flags_override_config(self, config_file):
        args = build_parser().parse_args(
            ["pretrain", "corpus", "--config", str(config_file), "--dim", "4", "--epochs", "7", "--policy", "strict"]
        )
        config = resolve_config(args)
        assert config.embed.dim == 4
        assert config.arch.embed_dim == 4
        assert config.train.epochs == 7
        assert config.symbolize.mode is SymbolizationMode.STRICT
        assert config.arch.slice_len == 16

    def test_epochs_target_the_subcommand(self):
        embed = resolve_config(build_parser().parse_args(["train-embed", "s.jsonl", "--epochs", "3"]))
        assert embed.embed.epochs == 3
        finetune = resolve_config(build_parser().parse_args(["finetune", "c", "-m", "m", "--epochs", "4"]))
        assert finetune.pipeline.finetune_epochs == 4

    def test_callsite_accepts_hex(self):
        args = build_parser().parse_args(["saliency", "x", "-m", "m", "--callsite", "0x1018", "--callee", "4608"])
        assert (args.callsite, args.callee) == (0x1018, 0x1200)


class TestSingleBinaryCommands:
    def test_ingest(self, toy_file, capsys):
        assert main(["ingest", str(toy_file)]) == 0
        out = capsys.readouterr().out
        assert "Functions:           4" in out
        assert "Indirect calls:      1" in out

    def test_ingest_objdump(self, tmp_path, capsys):
        listing = tmp_path / "prog.txt"
        listing.write_text(OBJDUMP)
        out_dir = tmp_path / "norm"
        assert main(["ingest", str(listing), "--objdump", "--out", str(out_dir)]) == 0
        lines = (out_dir / "prog.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["bin"] == "prog"
        assert "Direct calls:        1" in capsys.readouterr().out

    def test_missing_input(self, tmp_path):
        assert main(["ingest", str(tmp_path / "nope.jsonl")]) == 2

    def test_malformed_input(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert main(["ingest", str(bad)]) == 2

    def test_missing_config(self, toy_file, tmp_path):
        assert main(["slice", str(toy_file), "--config", str(tmp_path / "none.toml")]) == 1

    def test_slice_symbolize_train_embed(self, toy_file, tmp_path):
        slices = tmp_path / "toy.slices.jsonl"
        assert main(["slice", str(toy_file), "--out", str(slices)]) == 0
        assert len(slices.read_text().splitlines()) == 2 + 3  # callsites, callees

        sym = tmp_path / "toy.sym.jsonl"
        assert main(["symbolize", str(slices), "--out", str(sym)]) == 0
        assert (tmp_path / "vocab.json").exists()

        model = tmp_path / "embed"
        assert main(["train-embed", str(sym), "--out", str(model), "--dim", "4", "--epochs", "2"]) == 0
        assert (model / EMBEDDER_FILE).exists()
        manifest = json.loads((model / "manifest.json").read_text())
        assert manifest["artifacts"] == [EMBEDDER_FILE]
        assert "toy.sym.jsonl" in manifest["inputs"]

    def test_gen_corpus(self, tmp_path, config_file):
        out = tmp_path / "corpus"
        assert main(["gen-corpus", "--config", str(config_file), "--binaries", "2", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == ["bin000.jsonl", "bin001.jsonl", "truth.jsonl"]

    def test_gen_corpus_needs_out(self):
        assert main(["gen-corpus"]) == 1


class TestRun:
    def test_outputs(self, run_dir):
        for name in ("manifest.json", "config.toml", "events.jsonl", "split.json", "eval_report.json",
                     f"pretrain/{EMBEDDER_FILE}", f"pretrain/{MATCHER_FILE}",
                     f"finetune/{EMBEDDER_FILE}", f"finetune/{MATCHER_FILE}"):
            assert (run_dir / name).exists(), name
        split = json.loads((run_dir / "split.json").read_text())
        for b in split["test"]:
            assert (run_dir / "callgraphs" / f"{b}.json").exists()
            assert (run_dir / "callgraphs" / f"{b}.dot").exists()
            assert (run_dir / "scores" / f"{b}.jsonl").exists()

    def test_manifest_lists_artifacts(self, run_dir):
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert f"finetune/{MATCHER_FILE}" in manifest["artifacts"]
        assert "truth.jsonl" in manifest["inputs"]

    def test_rerun_is_identical(self, run_dir, config_file, tmp_path):
        assert main(["run", "--config", str(config_file), "--out", str(tmp_path)]) == 0
        for name in ("manifest.json", "eval_report.json", "events.jsonl",
                     f"finetune/{MATCHER_FILE}", f"pretrain/{EMBEDDER_FILE}"):
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name

    def test_rerun_into_same_dir(self, run_dir, config_file, tmp_path):
        assert main(["run", "--config", str(config_file), "--out", str(tmp_path)]) == 0
        assert main(["run", "--config", str(config_file), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "events.jsonl").read_bytes() == (run_dir / "events.jsonl").read_bytes()

    def test_reports_reference_manifest(self, run_dir):
        digest = json.loads((run_dir / "manifest.json").read_text())["digest"]
        assert json.loads((run_dir / "eval_report.json").read_text())["manifest"] == digest
        assert json.loads((run_dir / "split.json").read_text())["manifest"] == digest
        for b in json.loads((run_dir / "split.json").read_text())["test"]:
            assert json.loads((run_dir / "callgraphs" / f"{b}.json").read_text())["manifest"] == digest
            assert f"manifest={digest}" in (run_dir / "callgraphs" / f"{b}.dot").read_text()

    def test_eval_report_file_references_its_manifest(self, run_dir, config_file, tmp_path):
        assert main(["eval", str(run_dir / "corpus"), "-m", str(run_dir / "finetune"), "--config", str(config_file),
                     "--out", str(tmp_path)]) == 0
        digest = json.loads((tmp_path / "manifest.json").read_text())["digest"]
        assert json.loads((tmp_path / "eval_report.json").read_text())["manifest"] == digest

    def test_predict_and_emit(self, run_dir, toy_file, tmp_path):
        model = run_dir / "finetune"
        scores = tmp_path / "toy.scores.jsonl"
        assert main(["predict", str(toy_file), "-m", str(model), "--out", str(scores)]) == 0
        assert len(scores.read_text().splitlines()) == 2  # one icall x two address-taken functions

        dot = tmp_path / "toy.dot"
        assert main(["emit-cg", str(toy_file), "--scores", str(scores), "--format", "dot", "--out", str(dot)]) == 0
        assert "digraph toy" in dot.read_text()

        cg = tmp_path / "toy.json"
        assert main(["emit-cg", str(toy_file), "-m", str(model), "--out", str(cg)]) == 0
        assert json.loads(cg.read_text())["direct_edges"][0]["callsite"] == "0x1009"

    def test_emit_needs_scores_or_model(self, toy_file):
        assert main(["emit-cg", str(toy_file)]) == 1

    def test_eval(self, run_dir, config_file, capsys):
        corpus = run_dir / "corpus"
        assert main(["eval", str(corpus), "-m", str(run_dir / "pretrain"), "--config", str(config_file),
                     "--kind", "direct", "--split", "validation"]) == 0
        assert "DIRECT CALLS (validation)" in capsys.readouterr().out

    def test_saliency(self, run_dir, toy_file, capsys):
        assert main(["saliency", str(toy_file), "-m", str(run_dir / "finetune"),
                     "--callsite", "0x1018", "--callee", "0x1200"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("d = ")
        assert "--- callsite 0x1018 ---" in out

    def test_vocab_mismatch_exits_3(self, run_dir, toy_file, tmp_path):
        model = tmp_path / "mixed"
        model.mkdir()
        shutil.copy(run_dir / "finetune" / MATCHER_FILE, model / MATCHER_FILE)
        policy = SymbolizationPolicy(SymbolizationMode.LOOSE, 10)
        other = train_embedder([["nop", "ret"]], build_vocabulary([["nop", "ret"]], policy),
                               EmbedderConfig(dim=8, epochs=1))
        save_embedder(other, model / EMBEDDER_FILE)
        assert main(["predict", str(toy_file), "-m", str(model)]) == 3

    def test_missing_model_exits_2(self, toy_file, tmp_path):
        assert main(["predict", str(toy_file), "-m", str(tmp_path)]) == 2
