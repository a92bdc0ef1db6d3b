"""Span and trace-DAG model: ingestion, latency decomposition, path extraction.

Traces arrive as newline-delimited JSON span records. Each trace is rebuilt
into an immutable DAG keyed by parent links, and latency is split into
self-processing time (the span's own compute) and downstream time covered
by its direct children.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Optional

SPAN_FIELDS = (
    "trace_id",
    "span_id",
    "parent_id",
    "service",
    "operation",
    "start_us",
    "duration_us",
    "error",
)


class TraceError(Exception):
    """A trace or span violated a structural invariant."""


@dataclass(frozen=True)
class Span:
    span_id: str
    parent_id: Optional[str]
    service: str
    operation: str
    start: int
    duration: int
    error: bool = False

    @property
    def end(self) -> int:
        return self.start + self.duration


class TraceGraph:
    """One distributed trace as a rooted span DAG.

    Immutable after construction; children are kept sorted by
    (start, span_id) so traversals are reproducible.
    """

    def __init__(self, trace_id: str, spans: Iterable[Span]):
        self.trace_id = trace_id
        self.spans: dict[str, Span] = {}
        roots = []
        for sp in spans:
            if sp.span_id in self.spans:
                raise TraceError(f"duplicate span_id {sp.span_id!r} in trace {trace_id!r}")
            self.spans[sp.span_id] = sp
            if sp.parent_id is None:
                roots.append(sp.span_id)
        if len(roots) != 1:
            raise TraceError(f"trace {trace_id!r} has {len(roots)} roots, expected 1")
        self.root_id = roots[0]
        self._children: dict[str, list[str]] = {sid: [] for sid in self.spans}
        for sp in self.spans.values():
            if sp.parent_id is not None:
                if sp.parent_id not in self.spans:
                    raise TraceError(
                        f"span {sp.span_id!r} references missing parent {sp.parent_id!r}"
                    )
                self._children[sp.parent_id].append(sp.span_id)
        for sid, kids in self._children.items():
            kids.sort(key=lambda cid: (self.spans[cid].start, cid))
        self._check_connected()

    def _check_connected(self) -> None:
        seen = set()
        stack = [self.root_id]
        while stack:
            sid = stack.pop()
            if sid in seen:
                raise TraceError(f"trace {self.trace_id!r} has a parent cycle at {sid!r}")
            seen.add(sid)
            stack.extend(self._children[sid])
        if len(seen) != len(self.spans):
            raise TraceError(f"trace {self.trace_id!r} is not connected from its root")

    @property
    def root(self) -> Span:
        return self.spans[self.root_id]

    def children(self, span_id: str) -> list[Span]:
        return [self.spans[cid] for cid in self._children[span_id]]

    def edges(self) -> list[tuple[str, str]]:
        return [(pid, cid) for pid, kids in self._children.items() for cid in kids]

    def __len__(self) -> int:
        return len(self.spans)

    def __repr__(self) -> str:
        return f"TraceGraph({self.trace_id!r}, {len(self.spans)} spans)"


@dataclass(frozen=True)
class InvocationPath:
    services: tuple[str, ...]

    def __post_init__(self):
        if not self.services:
            raise TraceError("invocation path must be non-empty")

    def __len__(self) -> int:
        return len(self.services)


@dataclass
class ParseIssue:
    line: int
    message: str


@dataclass
class ParseResult:
    traces: list[TraceGraph]
    issues: list[ParseIssue] = field(default_factory=list)


def _parse_record(line: str) -> Span | tuple[str, Span]:
    rec = json.loads(line)
    missing = [f for f in SPAN_FIELDS if f not in rec]
    if missing:
        raise ValueError(f"missing fields: {', '.join(missing)}")
    duration = int(rec["duration_us"])
    if duration < 0:
        raise ValueError(f"negative duration {duration}")
    parent = rec["parent_id"] or None
    span = Span(
        span_id=str(rec["span_id"]),
        parent_id=None if parent is None else str(parent),
        service=str(rec["service"]),
        operation=str(rec["operation"]),
        start=int(rec["start_us"]),
        duration=duration,
        error=bool(int(rec["error"])),
    )
    return str(rec["trace_id"]), span


def parse_traces(stream: IO[str] | Iterable[str]) -> ParseResult:
    """Parse newline-delimited span records into validated trace graphs.

    Malformed records and invalid traces are skipped and reported as issues;
    all remaining well-formed traces are returned, ordered by first
    appearance in the input.
    """
    grouped: dict[str, list[Span]] = {}
    order: list[str] = []
    issues: list[ParseIssue] = []
    bad_traces: set[str] = set()
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            trace_id, span = _parse_record(line)
        except (ValueError, json.JSONDecodeError) as exc:
            issues.append(ParseIssue(lineno, f"malformed record: {exc}"))
            continue
        if trace_id not in grouped:
            grouped[trace_id] = []
            order.append(trace_id)
        grouped[trace_id].append(span)

    traces = []
    for trace_id in order:
        if trace_id in bad_traces:
            continue
        try:
            traces.append(TraceGraph(trace_id, grouped[trace_id]))
        except TraceError as exc:
            issues.append(ParseIssue(0, str(exc)))
    return ParseResult(traces=traces, issues=issues)


def emit_traces(traces: Iterable[TraceGraph], stream: IO[str]) -> None:
    """Write traces back out in the span-record format (inverse of parse)."""
    for trace in traces:
        for sid in sorted(trace.spans, key=lambda s: (trace.spans[s].start, s)):
            sp = trace.spans[sid]
            rec = {
                "trace_id": trace.trace_id,
                "span_id": sp.span_id,
                "parent_id": sp.parent_id or "",
                "service": sp.service,
                "operation": sp.operation,
                "start_us": sp.start,
                "duration_us": sp.duration,
                "error": int(sp.error),
            }
            stream.write(json.dumps(rec, sort_keys=False) + "\n")


def interval_union_length(intervals: Iterable[tuple[int, int]]) -> int:
    """Total length covered by a set of half-open intervals."""
    ivs = sorted((lo, hi) for lo, hi in intervals if hi > lo)
    total = 0
    cur_lo = cur_hi = None
    for lo, hi in ivs:
        if cur_hi is None or lo > cur_hi:
            if cur_hi is not None:
                total += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo
    return total


def self_latency(span: Span, trace: TraceGraph) -> int:
    """Span duration minus the interval union of its direct children.

    Child intervals are clipped to the parent's interval before the union,
    which tolerates clock skew; the result is clamped to >= 0.
    """
    if trace.spans.get(span.span_id) is not span and span.span_id not in trace.spans:
        raise TraceError(f"span {span.span_id!r} not in trace {trace.trace_id!r}")
    span = trace.spans[span.span_id]
    clipped = []
    for child in trace.children(span.span_id):
        lo = max(child.start, span.start)
        hi = min(child.end, span.end)
        if hi > lo:
            clipped.append((lo, hi))
    covered = interval_union_length(clipped)
    return max(0, span.duration - covered)


def e2e_latency(trace: TraceGraph) -> int:
    """End-to-end latency of a trace: the root span's duration."""
    return trace.root.duration


def root_to_leaf_paths(trace: TraceGraph) -> list[InvocationPath]:
    """All root-to-leaf service paths, children visited in (start, span_id) order."""
    paths: list[InvocationPath] = []

    def walk(span_id: str, prefix: list[str]) -> None:
        prefix.append(trace.spans[span_id].service)
        kids = trace._children[span_id]
        if not kids:
            paths.append(InvocationPath(tuple(prefix)))
        else:
            for cid in kids:
                walk(cid, prefix)
        prefix.pop()

    walk(trace.root_id, [])
    return paths


def self_latencies(trace: TraceGraph) -> dict[str, int]:
    """Self latency of every span in a trace, keyed by span_id."""
    return {sid: self_latency(sp, trace) for sid, sp in trace.spans.items()}


def iter_service_self_latencies(traces: Iterable[TraceGraph]) -> Iterator[tuple[str, int]]:
    """Yield (service, self_latency_us) over every span of every trace."""
    for trace in traces:
        for sid, sp in trace.spans.items():
            yield sp.service, self_latency(sp, trace)
