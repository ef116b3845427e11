"""
Recovered call graphs.

Nodes are function start addresses. Direct edges come from static
extraction; indirect edges are predictions with d < threshold whose callee
is address-taken. The graph is a networkx MultiDiGraph keyed by callsite,
so two callsites in one caller may target the same callee.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

import graphviz
import networkx as nx

from .errors import ParseError
from .ingest import ProgramModel, extract_direct_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredPair:
    """One scored (callsite, candidate callee) pair."""
    binary_id: str
    callsite: int
    callee: int
    d: float
    match: bool

    def to_json(self) -> str:
        return json.dumps({
            "bin": self.binary_id,
            "callsite": hex(self.callsite),
            "callee": hex(self.callee),
            "d": self.d,
            "match": self.match,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ScoredPair":
        data = json.loads(line)
        return cls(
            binary_id=data.get("bin", ""),
            callsite=int(data["callsite"], 16),
            callee=int(data["callee"], 16),
            d=float(data["d"]),
            match=bool(data["match"]),
        )


def write_scores(scores: Iterable[ScoredPair], path: Path) -> int:
    count = 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for s in scores:
            f.write(s.to_json() + "\n")
            count += 1
    return count


def iter_scores(path: Path) -> Iterator[ScoredPair]:
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield ScoredPair.from_json(line)
            except (KeyError, ValueError) as e:
                raise ParseError(f"bad score record: {e}", line_no) from e


@dataclass
class RecoveredCallGraph:
    binary_id: str
    threshold: float
    graph: nx.MultiDiGraph
    # digest of the run manifest that produced the graph, if any
    manifest: str | None = None

    def edges(self, kind: str) -> list[tuple[int, int, int, dict]]:
        """(caller, callee, callsite, attrs) for edges of `kind`, sorted by callsite."""
        out = [
            (u, v, k, data)
            for u, v, k, data in self.graph.edges(keys=True, data=True)
            if data["kind"] == kind
        ]
        return sorted(out, key=lambda e: (e[2], e[1]))

    @property
    def direct_edges(self) -> list[tuple[int, int]]:
        return [(cs, callee) for _, callee, cs, _ in self.edges("direct")]

    @property
    def indirect_edges(self) -> list[tuple[int, int, float]]:
        return [(cs, callee, data["d"]) for _, callee, cs, data in self.edges("indirect")]

    def to_dict(self) -> dict:
        out = {
            "bin": self.binary_id,
            "threshold": self.threshold,
            "nodes": [
                {"addr": hex(n), "name": data["name"], "address_taken": data["address_taken"]}
                for n, data in sorted(self.graph.nodes(data=True))
            ],
            "direct_edges": [
                {"callsite": hex(cs), "caller": hex(u), "callee": hex(v)}
                for u, v, cs, _ in self.edges("direct")
            ],
            "indirect_edges": [
                {"callsite": hex(cs), "caller": hex(u), "callee": hex(v), "d": data["d"]}
                for u, v, cs, data in self.edges("indirect")
            ],
        }
        if self.manifest is not None:
            out["manifest"] = self.manifest
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_dot(self) -> str:
        comment = f"threshold={self.threshold:g}"
        if self.manifest is not None:
            comment += f" manifest={self.manifest}"
        dot = graphviz.Digraph(name=self.binary_id or "callgraph", comment=comment)
        for n, data in sorted(self.graph.nodes(data=True)):
            dot.node(hex(n), label=data["name"])
        for u, v, _, _ in self.edges("direct"):
            dot.edge(hex(u), hex(v))
        for u, v, _, data in self.edges("indirect"):
            dot.edge(hex(u), hex(v), style="dashed", label=f"{data['d']:.3f}")
        return dot.source


def emit_callgraph(
    program: ProgramModel,
    predictions: Iterable[ScoredPair],
    threshold: float,
) -> RecoveredCallGraph:
    """
    Build the call graph of `program` from static direct calls plus every
    prediction below `threshold`.
    """
    g = nx.MultiDiGraph()
    for fn in program.functions:
        g.add_node(fn.start_addr, name=fn.name, address_taken=fn.address_taken)

    for ref, callee in extract_direct_pairs(program):
        g.add_edge(ref.enclosing_function, callee, key=ref.addr, kind="direct", d=None)

    dropped = 0
    for pred in predictions:
        if pred.binary_id and pred.binary_id != program.binary_id:
            continue
        if not pred.d < threshold:
            continue
        caller = program.function_at(pred.callsite)
        callee = program.function_starting_at(pred.callee)
        if caller is None or callee is None or not callee.address_taken:
            dropped += 1
            continue
        g.add_edge(caller.start_addr, callee.start_addr, key=pred.callsite, kind="indirect", d=pred.d)

    if dropped:
        log.warning("dropped predictions outside the candidate set",
                    extra={"bin": program.binary_id, "dropped": dropped})
    return RecoveredCallGraph(binary_id=program.binary_id, threshold=threshold, graph=g)
