"""Span model tests: parsing, latency decomposition, path extraction."""

import io
import json

import pytest
from hypothesis import given, strategies as st

from helpers import (
    chain_trace,
    naive_root_leaf_paths,
    naive_self_latency,
    random_tree_trace,
)
from tracealloc.trace_model import (
    Span,
    TraceError,
    TraceGraph,
    e2e_latency,
    emit_traces,
    interval_union_length,
    parse_traces,
    root_to_leaf_paths,
    self_latency,
    self_latencies,
)

import numpy as np


def span(sid, parent, service="a", start=0, dur=100, error=False):
    return Span(span_id=sid, parent_id=parent, service=service,
                operation="call", start=start, duration=dur, error=error)


class TestTraceGraph:
    def test_single_root_required(self):
        with pytest.raises(TraceError):
            TraceGraph("t", [span("a", None), span("b", None)])
        with pytest.raises(TraceError):
            TraceGraph("t", [span("a", "b"), span("b", "a")])

    def test_duplicate_span_id(self):
        with pytest.raises(TraceError):
            TraceGraph("t", [span("a", None), span("a", "a")])

    def test_missing_parent(self):
        with pytest.raises(TraceError):
            TraceGraph("t", [span("a", None), span("b", "ghost")])

    def test_disconnected_cycle(self):
        spans = [span("r", None), span("x", "y"), span("y", "x")]
        with pytest.raises(TraceError):
            TraceGraph("t", spans)

    def test_children_sorted_by_start(self):
        spans = [
            span("r", None, dur=300),
            span("b", "r", start=200, dur=50),
            span("a", "r", start=10, dur=50),
        ]
        trace = TraceGraph("t", spans)
        assert [c.span_id for c in trace.children("r")] == ["a", "b"]


class TestParsing:
    def test_roundtrip(self, rng):
        traces = [random_tree_trace(rng, f"t{i}", ["a", "b", "c"]) for i in range(10)]
        buf = io.StringIO()
        emit_traces(traces, buf)
        buf.seek(0)
        result = parse_traces(buf)
        assert not result.issues
        assert len(result.traces) == len(traces)
        by_id = {t.trace_id: t for t in result.traces}
        for t in traces:
            got = by_id[t.trace_id]
            assert got.spans == t.spans
            assert sorted(got.edges()) == sorted(t.edges())

    def test_malformed_lines_reported_not_fatal(self):
        good = {"trace_id": "t", "span_id": "s", "parent_id": "",
                "service": "a", "operation": "op", "start_us": 0,
                "duration_us": 10, "error": 0}
        lines = [
            json.dumps(good),
            "not json",
            json.dumps({"trace_id": "u", "span_id": "s"}),  # missing fields
            json.dumps(dict(good, trace_id="v", duration_us=-5)),
        ]
        result = parse_traces(lines)
        assert len(result.traces) == 1
        assert result.traces[0].trace_id == "t"
        assert len(result.issues) == 3

    def test_invalid_trace_skipped(self):
        rec = {"trace_id": "t", "span_id": "s", "parent_id": "ghost",
               "service": "a", "operation": "op", "start_us": 0,
               "duration_us": 10, "error": 0}
        result = parse_traces([json.dumps(rec)])
        assert not result.traces
        assert result.issues


intervals_st = st.lists(
    st.tuples(st.integers(0, 200), st.integers(0, 200)).map(lambda p: (min(p), max(p))),
    max_size=8)


@given(intervals_st)
def test_interval_union_matches_point_set(ivs):
    expected = len({x for lo, hi in ivs for x in range(lo, hi)})
    assert interval_union_length(ivs) == expected


class TestSelfLatency:
    def test_leaf_is_own_duration(self):
        trace = chain_trace("t", ["a", "b"], work=500)
        leaf = trace.spans["t-1"]
        assert self_latency(leaf, trace) == leaf.duration

    def test_matches_point_set_oracle(self, rng):
        for i in range(30):
            trace = random_tree_trace(rng, f"t{i}", ["a", "b", "c", "d"])
            for sid in trace.spans:
                assert self_latency(trace.spans[sid], trace) == \
                    naive_self_latency(trace, sid)

    def test_overlapping_children_counted_once(self):
        spans = [
            span("r", None, dur=100),
            span("a", "r", start=10, dur=40),
            span("b", "r", start=30, dur=40),  # overlaps a on [30, 50)
        ]
        trace = TraceGraph("t", spans)
        assert self_latency(trace.spans["r"], trace) == 100 - 60

    def test_child_clipped_to_parent(self):
        spans = [
            span("r", None, start=0, dur=50),
            span("a", "r", start=40, dur=100),  # runs past the parent
        ]
        trace = TraceGraph("t", spans)
        assert self_latency(trace.spans["r"], trace) == 40

    def test_self_latencies_covers_all_spans(self, rng):
        trace = random_tree_trace(rng, "t", ["a", "b"])
        lats = self_latencies(trace)
        assert set(lats) == set(trace.spans)


class TestPaths:
    def test_e2e_is_root_duration(self):
        trace = chain_trace("t", ["a", "b", "c"], work=700)
        assert e2e_latency(trace) == trace.root.duration

    def test_matches_naive_enumeration(self, rng):
        for i in range(40):
            trace = random_tree_trace(rng, f"t{i}", ["a", "b", "c"])
            got = [p.services for p in root_to_leaf_paths(trace)]
            assert got == naive_root_leaf_paths(trace)

    def test_chain_single_path(self):
        trace = chain_trace("t", ["x", "y", "z"])
        assert [p.services for p in root_to_leaf_paths(trace)] == [("x", "y", "z")]
