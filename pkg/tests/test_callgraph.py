"""Tests for call graph emission and score files."""

import json

import pytest

from cgforge.callgraph import ScoredPair, emit_callgraph, iter_scores, write_scores
from cgforge.errors import ParseError


def _pred(callee, d, callsite=0x1018, binary_id="toy"):
    return ScoredPair(binary_id, callsite, callee, d, d < 0.5)


class TestEmitCallgraph:
    def test_direct_edges_only(self, toy_program):
        cg = emit_callgraph(toy_program, [], 0.5)
        assert cg.direct_edges == [(0x1009, 0x1100)]
        assert cg.indirect_edges == []
        assert sorted(cg.graph.nodes) == [0x1000, 0x1100, 0x1200, 0x1300]

    def test_threshold_filters_predictions(self, toy_program):
        preds = [_pred(0x1200, 0.1), _pred(0x1300, 0.6)]
        cg = emit_callgraph(toy_program, preds, 0.5)
        assert cg.indirect_edges == [(0x1018, 0x1200, 0.1)]
        assert emit_callgraph(toy_program, preds, 0.7).indirect_edges == [
            (0x1018, 0x1200, 0.1), (0x1018, 0x1300, 0.6),
        ]

    def test_score_equal_to_threshold_is_dropped(self, toy_program):
        assert emit_callgraph(toy_program, [_pred(0x1200, 0.5)], 0.5).indirect_edges == []

    def test_non_address_taken_callee_is_dropped(self, toy_program):
        cg = emit_callgraph(toy_program, [_pred(0x1100, 0.0)], 0.5)
        assert cg.indirect_edges == []

    def test_other_binary_ignored(self, toy_program):
        cg = emit_callgraph(toy_program, [_pred(0x1200, 0.0, binary_id="other")], 0.5)
        assert cg.indirect_edges == []

    def test_caller_is_enclosing_function(self, toy_program):
        cg = emit_callgraph(toy_program, [_pred(0x1200, 0.2)], 0.5)
        assert cg.graph.has_edge(0x1000, 0x1200, key=0x1018)


class TestSerialization:
    def test_to_dict(self, toy_program):
        d = emit_callgraph(toy_program, [_pred(0x1200, 0.25)], 0.5).to_dict()
        assert d["bin"] == "toy"
        assert d["direct_edges"] == [{"callsite": "0x1009", "caller": "0x1000", "callee": "0x1100"}]
        assert d["indirect_edges"] == [{"callsite": "0x1018", "caller": "0x1000", "callee": "0x1200", "d": 0.25}]
        assert {n["addr"]: n["address_taken"] for n in d["nodes"]} == {
            "0x1000": False, "0x1100": False, "0x1200": True, "0x1300": True,
        }

    def test_to_json_parses(self, toy_program):
        cg = emit_callgraph(toy_program, [], 0.5)
        assert json.loads(cg.to_json()) == cg.to_dict()

    def test_to_dot(self, toy_program):
        dot = emit_callgraph(toy_program, [_pred(0x1200, 0.25)], 0.5).to_dot()
        assert dot.startswith("// threshold=0.5")
        assert "digraph toy" in dot
        assert '"0x1000" -> "0x1100"' in dot
        assert "style=dashed" in dot


class TestScoreFiles:
    def test_write_and_iterate(self, tmp_path):
        scores = [_pred(0x1200, 0.125), _pred(0x1300, 0.75)]
        path = tmp_path / "scores" / "toy.jsonl"
        assert write_scores(scores, path) == 2
        assert list(iter_scores(path)) == scores

    def test_bad_record(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text('{"callsite": "0x10"}\n')
        with pytest.raises(ParseError):
            list(iter_scores(path))
