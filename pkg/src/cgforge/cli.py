#!/usr/bin/env python3
"""
CLI for cgforge.

Commands:
    ingest       - Validate normalized disassembly (or import objdump output)
    slice        - Slice every callsite and candidate callee of a binary
    symbolize    - Rewrite slice tokens into the closed vocabulary
    train-embed  - Train token embeddings on symbolized slices
    gen-corpus   - Generate a synthetic corpus with ground truth
    pretrain     - Train the direct-call learner
    finetune     - Train the indirect-call learner from a pretrained model
    predict      - Score indirect callsites of one binary
    eval         - Precision / recall / AICT on a split
    emit-cg      - Write the recovered call graph (JSON or DOT)
    compare      - Fine-tune modes side by side
    saliency     - Per-token saliency for one (callsite, callee) pair
    run          - gen-corpus, pretrain, finetune, eval and emit-cg in one go

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 model mismatch.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import Config, RunManifest
from .errors import CgforgeError, ConfigError, DataError

log = logging.getLogger("cgforge.cli")


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; usage errors here exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_auto(value: str) -> int:
    return int(value, 0)


def resolve_config(args) -> Config:
    """Config file (or defaults) with command-line flags applied on top."""
    config = Config.load(Path(args.config)) if getattr(args, "config", None) else Config()
    data = config.to_dict()

    def override(section: str, key: str, value):
        if value is not None:
            data.setdefault(section, {})[key] = value

    if args.seed is not None:
        data["seed"] = args.seed
    override("symbolize", "policy", args.policy)
    override("symbolize", "modulus", args.modulus)
    if args.dim is not None:
        data["embed"]["dim"] = args.dim
        data["arch"]["embed_dim"] = args.dim
    override("arch", "slice_len", args.slice_len)
    override("train", "threshold", args.threshold)
    override("train", "batch_size", args.batch)
    override("pipeline", "jobs", args.jobs)
    if getattr(args, "context", None):
        override("pipeline", "context", args.context)

    # --epochs and --lr apply to whatever the subcommand trains.
    if args.command == "train-embed":
        override("embed", "epochs", args.epochs)
        override("embed", "learning_rate", args.lr)
    elif args.command == "finetune":
        override("pipeline", "finetune_epochs", args.epochs)
        override("train", "learning_rate", args.lr)
    else:
        override("train", "epochs", args.epochs)
        override("train", "learning_rate", args.lr)
    if getattr(args, "mode", None):
        override("pipeline", "finetune_mode", args.mode)
    if getattr(args, "binaries", None) is not None:
        override("corpus", "binaries", args.binaries)
    return Config.from_dict(data)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_program(path: Path):
    from .ingest import parse_program

    if not path.exists():
        raise DataError(f"input not found: {path}")
    with open(path) as f:
        return parse_program(f)


def _start_run(config: Config, out: Path, inputs: dict[str, Path] | None = None):
    from .logger import EVENTS_FILE, EventLog

    manifest = RunManifest.create(config, inputs)
    config.dump(out / "config.toml")
    return manifest, EventLog(out / EVENTS_FILE, manifest.digest)


def _finish_run(manifest: RunManifest, out: Path, *artifacts: str):
    manifest.artifacts = sorted(set(manifest.artifacts) | set(artifacts))
    manifest.write(out)


def _write_report(report, out: Path, name: str, title: str, manifest: RunManifest):
    data = {**report.to_dict(), "manifest": manifest.digest}
    (out / name).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(report.format_report(title))


def cmd_ingest(args):
    """Validate a disassembly file and write it back normalized."""
    from .importers import import_objdump
    from .ingest import dump_program, extract_direct_pairs, list_callsites, parse_program

    path = Path(args.input)
    if not path.exists():
        raise DataError(f"input not found: {path}")
    with open(path) as f:
        if args.objdump:
            program = parse_program(import_objdump(f, args.bin or path.stem))
        else:
            program = parse_program(f)

    callsites = list_callsites(program)
    direct = extract_direct_pairs(program)
    indirect = sum(cs.kind.value == "indirect" for cs in callsites)
    print(f"Binary: {program.binary_id}")
    print(f"Functions:           {len(program.functions)}")
    print(f"Instructions:        {sum(len(fn.instructions) for fn in program.functions)}")
    print(f"Direct calls:        {len(direct)} ({len(direct.skipped)} to non-function targets)")
    print(f"Indirect calls:      {indirect}")
    print(f"Address-taken funcs: {len(program.address_taken_functions())}")

    if args.out:
        out = Path(args.out)
        target = out / f"{program.binary_id}.jsonl" if out.is_dir() or not out.suffix else out
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("\n".join(dump_program(program)) + "\n")
        print(f"Written to: {target}")


def cmd_slice(args):
    """Slice all callsites and all candidate callees of one binary."""
    from .ingest import extract_direct_pairs, list_callsites
    from .slicer import SYSV, Origin, Phase, SliceReport, classify_instruction, write_slices
    from .pipeline import make_slice

    config = resolve_config(args)
    program = _read_program(Path(args.input))
    keys = [(Origin.CALLSITE, cs.addr) for cs in list_callsites(program)]
    callees = {fn.start_addr for fn in program.address_taken_functions()}
    callees.update(callee for _, callee in extract_direct_pairs(program))
    keys.extend((Origin.CALLEE, c) for c in sorted(callees))
    slices = [make_slice(program, origin, addr, config.pipeline.context) for origin, addr in keys]

    out = Path(args.out) if args.out else Path(f"{program.binary_id}.slices.jsonl")
    count = write_slices(slices, out)
    print(f"{count} slices written to {out}")

    if args.verbose:
        report = SliceReport()
        for fn in program.functions:
            for insn in fn.instructions:
                report.add(*classify_instruction(insn, SYSV, Phase.CALLEE))
        print(f"Kept {report.kept}, dropped {report.dropped} (callee rules)")
        for reason, n in sorted(report.by_reason.items()):
            print(f"  {reason}: {n}")


def cmd_symbolize(args):
    """Symbolize a slice file and write its vocabulary next to it."""
    from .slicer import iter_slices, write_slices
    from .symbolizer import build_vocabulary, symbolize_slice

    config = resolve_config(args)
    slices = [symbolize_slice(s, config.symbolize) for s in iter_slices(Path(args.input))]
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".sym.jsonl")
    write_slices(slices, out)
    vocab = build_vocabulary(slices, config.symbolize)
    vocab_path = out.with_name("vocab.json")
    vocab.save(vocab_path)
    print(f"{len(slices)} slices written to {out}")
    print(f"Vocabulary: {vocab.size} tokens ({vocab.digest()}) in {vocab_path}")


def cmd_train_embed(args):
    """Train PV-DBOW token embeddings on symbolized slices."""
    from .embedder import save_embedder, train_embedder
    from .pipeline import EMBEDDER_FILE
    from .slicer import iter_slices
    from .symbolizer import build_vocabulary

    config = resolve_config(args)
    out = _out_dir(args)
    slices = list(iter_slices(Path(args.input)))
    vocab = build_vocabulary(slices, config.symbolize)
    manifest, events = _start_run(config, out, {Path(args.input).name: Path(args.input)})
    model = train_embedder(slices, vocab, config.embed)
    for epoch, loss in enumerate(model.loss_history):
        events.log("train-embed", epoch=epoch, mean_loss=loss)
    save_embedder(model, out / EMBEDDER_FILE, manifest_hash=manifest.digest)
    _finish_run(manifest, out, EMBEDDER_FILE)
    print(f"Embedder ({vocab.size} tokens, k={model.dim}) written to {out / EMBEDDER_FILE}")


def cmd_gen_corpus(args):
    """Generate a synthetic corpus."""
    from .config import derive_seed
    from .corpus import build_corpus

    config = resolve_config(args)
    out = _out_dir(args)
    summary = build_corpus(out, config.corpus, derive_seed(config.seed, "corpus"))
    print(f"Binaries:            {len(summary.binaries)}")
    print(f"Direct callsites:    {summary.direct_callsites}")
    print(f"Indirect callsites:  {summary.indirect_callsites}")
    print(f"Indirect positives:  {summary.indirect_positives}")
    print(f"Written to: {out}")


def cmd_pretrain(args):
    """Train embedder and direct-call matcher on a corpus."""
    from .pipeline import EMBEDDER_FILE, MATCHER_FILE, load_dataset, run_pretrain

    config = resolve_config(args)
    out = _out_dir(args)
    data = load_dataset(Path(args.corpus), config)
    manifest, events = _start_run(config, out, data.inputs)
    artifacts, report = run_pretrain(data, config, events)
    artifacts.save(out, config, manifest.digest)
    (out / "split.json").write_text(json.dumps({**data.split.to_dict(), "manifest": manifest.digest}, indent=2) + "\n")
    produced = [EMBEDDER_FILE, MATCHER_FILE, "split.json"]
    if report is not None:
        _write_report(report, out, "pretrain_report.json", "DIRECT CALLS (validation)", manifest)
        produced.append("pretrain_report.json")
    _finish_run(manifest, out, *produced)


def cmd_finetune(args):
    """Train the indirect-call learner."""
    from .pipeline import EMBEDDER_FILE, MATCHER_FILE, Artifacts, load_dataset, run_finetune

    config = resolve_config(args)
    out = _out_dir(args)
    pretrained = Artifacts.load(Path(args.model))
    data = load_dataset(Path(args.corpus), config)
    manifest, events = _start_run(config, out, data.inputs)
    artifacts, report = run_finetune(pretrained, data, config, events=events)
    artifacts.save(out, config, manifest.digest)
    produced = [EMBEDDER_FILE, MATCHER_FILE]
    if report is not None:
        _write_report(report, out, "finetune_report.json", "INDIRECT CALLS (validation)", manifest)
        produced.append("finetune_report.json")
    _finish_run(manifest, out, *produced)


def _predict(args, config: Config):
    from .pipeline import Artifacts, SliceStore, predict_program

    artifacts = Artifacts.load(Path(args.model))
    program = _read_program(Path(args.input))
    store = SliceStore({program.binary_id: program}, artifacts.policy, config.pipeline.context)
    threshold = args.threshold if args.threshold is not None else config.train.threshold
    return program, predict_program(artifacts, store, program, threshold, config.train.batch_size), threshold


def cmd_predict(args):
    """Score every indirect callsite of a binary against its address-taken functions."""
    from .callgraph import write_scores

    config = resolve_config(args)
    program, scores, threshold = _predict(args, config)
    out = Path(args.out) if args.out else Path(f"{program.binary_id}.scores.jsonl")
    n = write_scores(scores, out)
    matches = sum(s.match for s in scores)
    print(f"{n} pairs scored, {matches} below threshold {threshold:g}; written to {out}")


def cmd_emit_cg(args):
    """Emit the recovered call graph of one binary."""
    from .callgraph import emit_callgraph, iter_scores

    config = resolve_config(args)
    if args.scores:
        program = _read_program(Path(args.input))
        scores = list(iter_scores(Path(args.scores)))
        threshold = args.threshold if args.threshold is not None else config.train.threshold
    elif args.model:
        program, scores, threshold = _predict(args, config)
    else:
        raise ConfigError("emit-cg needs --scores or --model")

    graph = emit_callgraph(program, scores, threshold)
    text = graph.to_dot() if args.format == "dot" else graph.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"{len(graph.direct_edges)} direct and {len(graph.indirect_edges)} indirect edges written to {args.out}")
    else:
        print(text)


def cmd_eval(args):
    """Evaluate a model on one split of a corpus."""
    from .ingest import CallKind
    from .pipeline import Artifacts, bucket_pairs, calibrate_threshold, evaluate, load_dataset

    config = resolve_config(args)
    artifacts = Artifacts.load(Path(args.model))
    data = load_dataset(Path(args.corpus), config)
    kind = CallKind(args.kind)
    pairs = bucket_pairs(data, config, kind, args.split)
    if not pairs:
        raise DataError(f"no {kind.value} pairs in the {args.split} split")
    threshold = args.threshold if args.threshold is not None else calibrate_threshold(artifacts, data, config, kind)
    report = evaluate(artifacts, data, pairs, threshold, config.train.batch_size)
    title = f"{kind.value.upper()} CALLS ({args.split})"
    if args.out:
        out = _out_dir(args)
        manifest, _ = _start_run(config, out, data.inputs)
        _write_report(report, out, "eval_report.json", title, manifest)
        _finish_run(manifest, out, "eval_report.json")
    else:
        print(report.format_report(title))


def cmd_compare(args):
    """Fine-tune under scratch, transfer and zero-shot and compare on test binaries."""
    from .pipeline import Artifacts, compare_modes, load_dataset

    config = resolve_config(args)
    out = _out_dir(args)
    pretrained = Artifacts.load(Path(args.model))
    data = load_dataset(Path(args.corpus), config)
    manifest, events = _start_run(config, out, data.inputs)
    reports = compare_modes(pretrained, data, config, events=events)

    print("=" * 60)
    print("FINE-TUNE MODES (test binaries)")
    print("=" * 60)
    print(f"{'mode':<12}{'precision':>11}{'recall':>9}{'f1':>9}{'aict':>9}")
    for mode, r in reports.items():
        aict = f"{r.aict:.2f}" if r.aict is not None else "-"
        print(f"{mode:<12}{r.precision:>11.3f}{r.recall:>9.3f}{r.f1:>9.3f}{aict:>9}")
    print("=" * 60)
    (out / "compare.json").write_text(
        json.dumps({"manifest": manifest.digest, **{m: r.to_dict() for m, r in reports.items()}}, indent=2, sort_keys=True)
        + "\n"
    )
    _finish_run(manifest, out, "compare.json")


def cmd_saliency(args):
    """Print per-token saliency of one pair."""
    from .embedder import embed_slice
    from .matcher import Branch, forward, saliency
    from .pipeline import Artifacts, SliceStore
    from .slicer import Origin

    config = resolve_config(args)
    artifacts = Artifacts.load(Path(args.model))
    program = _read_program(Path(args.input))
    store = SliceStore({program.binary_id: program}, artifacts.policy, config.pipeline.context)
    T = artifacts.matcher.arch.slice_len
    cs = store.get(program.binary_id, Origin.CALLSITE, args.callsite)
    callee = store.get(program.binary_id, Origin.CALLEE, args.callee)
    q, a = embed_slice(artifacts.embedder, cs, T), embed_slice(artifacts.embedder, callee, T)

    score = forward(artifacts.matcher, q, a)
    print(f"d = {score.d:.6f}")
    for branch, s in ((Branch.CALLSITE, cs), (Branch.CALLEE, callee)):
        values = saliency(artifacts.matcher, q, a, branch)
        tokens = list(s.tokens)
        if branch is Branch.CALLSITE and len(tokens) > T:
            start = min(max(s.anchor - T // 2, 0), len(tokens) - T)
            tokens = tokens[start:start + T]
        print()
        print(f"--- {branch.value} {s.addr:#x} ---")
        for tok, v in zip(tokens[:T], values):
            print(f"  {tok:<16}{v:.6f}")


def cmd_run(args):
    """Full pipeline into one output directory."""
    from .callgraph import write_scores
    from .config import derive_seed
    from .corpus import build_corpus
    from .pipeline import (
        EMBEDDER_FILE, MATCHER_FILE, bucket_pairs, calibrate_threshold, emit_callgraphs,
        evaluate, load_dataset, predict_program, run_finetune, run_pretrain,
    )

    config = resolve_config(args)
    out = _out_dir(args)
    corpus_dir = Path(args.corpus) if args.corpus else out / "corpus"
    if not args.corpus:
        build_corpus(corpus_dir, config.corpus, derive_seed(config.seed, "corpus"))

    data = load_dataset(corpus_dir, config)
    manifest, events = _start_run(config, out, data.inputs)
    produced = ["split.json"]
    (out / "split.json").write_text(json.dumps({**data.split.to_dict(), "manifest": manifest.digest}, indent=2) + "\n")

    pretrained, _ = run_pretrain(data, config, events)
    pretrained.save(out / "pretrain", config, manifest.digest)
    produced += [f"pretrain/{EMBEDDER_FILE}", f"pretrain/{MATCHER_FILE}"]

    artifacts, _ = run_finetune(pretrained, data, config, events=events)
    artifacts.save(out / "finetune", config, manifest.digest)
    produced += [f"finetune/{EMBEDDER_FILE}", f"finetune/{MATCHER_FILE}"]

    threshold = calibrate_threshold(artifacts, data, config)
    pairs = bucket_pairs(data, config)
    if pairs:
        report = evaluate(artifacts, data, pairs, threshold, config.train.batch_size)
        events.log("eval", precision=report.precision, recall=report.recall, f1=report.f1, aict=report.aict)
        _write_report(report, out, "eval_report.json", "INDIRECT CALLS (test)", manifest)
        produced.append("eval_report.json")

    store = data.with_policy(artifacts.policy).store
    for b, graph in emit_callgraphs(artifacts, data, data.split.test, threshold, config.train.batch_size).items():
        graph.manifest = manifest.digest
        (out / "callgraphs").mkdir(exist_ok=True)
        (out / "callgraphs" / f"{b}.json").write_text(graph.to_json() + "\n")
        (out / "callgraphs" / f"{b}.dot").write_text(graph.to_dot() + "\n")
        scores = predict_program(artifacts, store, data.programs[b], threshold, config.train.batch_size)
        write_scores(scores, out / "scores" / f"{b}.jsonl")
        produced += [f"callgraphs/{b}.json", f"callgraphs/{b}.dot", f"scores/{b}.jsonl"]
    _finish_run(manifest, out, *produced)
    print(f"Run complete: {out} (manifest {manifest.digest})")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", "-c", help="TOML config file (flags override it)")
    p.add_argument("--seed", type=int, help="Root seed")
    p.add_argument("--policy", choices=["strict", "loose"], help="Symbolization policy")
    p.add_argument("--modulus", type=int, help="Loose symbolization modulus N")
    p.add_argument("--dim", type=int, help="Embedding dimension k")
    p.add_argument("--slice-len", type=int, help="Slice length T")
    p.add_argument("--threshold", type=float, help="Match threshold tau")
    p.add_argument("--batch", type=int, help="Batch size")
    p.add_argument("--epochs", type=int, help="Training epochs")
    p.add_argument("--lr", type=float, help="Learning rate")
    p.add_argument("--jobs", type=int, help="Worker processes")
    p.add_argument("--context", choices=["sliced", "full"], help="Sliced or whole-function context")
    p.add_argument("--out", "-o", help="Output file or directory")
    p.add_argument("--verbose", "-v", action="store_true", help="INFO-level logs")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="cgforge",
        description="cgforge - learned call-graph recovery for x86-64 binaries",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def add(name: str, func, help: str) -> ArgumentParser:
        p = subparsers.add_parser(name, help=help)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "Validate or import disassembly")
    p.add_argument("input", help="Normalized JSONL (or objdump listing with --objdump)")
    p.add_argument("--objdump", action="store_true", help="Input is objdump -d -M intel output")
    p.add_argument("--bin", help="Binary id for imported listings (default: file stem)")

    p = add("slice", cmd_slice, "Slice callsites and callees of one binary")
    p.add_argument("input", help="Normalized JSONL")

    p = add("symbolize", cmd_symbolize, "Symbolize a slice file")
    p.add_argument("input", help="Slice JSONL")

    p = add("train-embed", cmd_train_embed, "Train token embeddings")
    p.add_argument("input", help="Symbolized slice JSONL")

    p = add("gen-corpus", cmd_gen_corpus, "Generate a synthetic corpus")
    p.add_argument("--binaries", type=int, help="Number of binaries")

    p = add("pretrain", cmd_pretrain, "Train on direct calls")
    p.add_argument("corpus", help="Corpus directory")

    p = add("finetune", cmd_finetune, "Train on indirect calls")
    p.add_argument("corpus", help="Corpus directory")
    p.add_argument("--model", "-m", required=True, help="Pretrained model directory")
    p.add_argument("--mode", choices=["transfer", "scratch", "zero-shot"], help="Initialization mode")

    p = add("predict", cmd_predict, "Score indirect callsites of one binary")
    p.add_argument("input", help="Normalized JSONL")
    p.add_argument("--model", "-m", required=True, help="Model directory")

    p = add("eval", cmd_eval, "Evaluate a model on a split")
    p.add_argument("corpus", help="Corpus directory")
    p.add_argument("--model", "-m", required=True, help="Model directory")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--kind", choices=["direct", "indirect"], default="indirect")

    p = add("emit-cg", cmd_emit_cg, "Emit the recovered call graph")
    p.add_argument("input", help="Normalized JSONL")
    p.add_argument("--model", "-m", help="Model directory (scores computed on the fly)")
    p.add_argument("--scores", help="Scores JSONL from predict")
    p.add_argument("--format", choices=["json", "dot"], default="json")

    p = add("compare", cmd_compare, "Compare fine-tune modes")
    p.add_argument("corpus", help="Corpus directory")
    p.add_argument("--model", "-m", required=True, help="Pretrained model directory")

    p = add("saliency", cmd_saliency, "Per-token saliency of one pair")
    p.add_argument("input", help="Normalized JSONL")
    p.add_argument("--model", "-m", required=True, help="Model directory")
    p.add_argument("--callsite", type=_int_auto, required=True, help="Callsite address (0x...)")
    p.add_argument("--callee", type=_int_auto, required=True, help="Callee start address (0x...)")

    p = add("run", cmd_run, "Full pipeline into one --out directory")
    p.add_argument("--corpus", help="Existing corpus directory (default: generate one)")
    p.add_argument("--binaries", type=int, help="Binaries to generate")
    p.add_argument("--mode", choices=["transfer", "scratch", "zero-shot"], help="Fine-tune mode")

    return parser


def main(argv=None) -> int:
    from .logger import setup_logging

    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(verbose=args.verbose)
    try:
        args.func(args)
    except CgforgeError as e:
        log.error(str(e), extra={"error": type(e).__name__, "exit_code": e.exit_code})
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
