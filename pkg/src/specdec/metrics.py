"""Trace recording, summary statistics, and comparison reports.

A decode run produces a :class:`DecodeTrace`: a merged, time-ordered list of
events recorded by the draft and verify actors. One stats schema serves both
wall-clock and virtual-clock runs; the ``clock`` field records which kind of
clock produced the numbers so reports never mix them silently.

Event kinds
    draft_token     one token published to D (positions: that token)
    verify_accept   a fully matched window published to V (positions: the
                    newly verified tokens, bonus token included for the
                    synchronous engine)
    verify_correct  a partially matched window: matched prefix plus the
                    correction token published to V
    rollback        the draft side acknowledged a correction and cropped
                    positions [pos_lo, pos_hi] from its buffer/state
    complete        end of run; pos_hi = prompt_length + generated tokens

``busy_ms`` is the duration the acting model was occupied producing the
event (forward-pass cost under the simulator, measured elapsed time under
the concurrent backend); the busy interval is ``[t_ms - busy_ms, t_ms]``.
``draft_accepted`` counts, for verify events, how many of the published
tokens were draft proposals (corrections and bonus tokens excluded).

Exports: event CSV (columns ``t_ms,actor,kind,pos_lo,pos_hi,busy_ms,
draft_accepted``), timeline CSV (columns ``t_ms,verified_tokens``), and
JSON mirrors of both. Column names are stable.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .errors import InvalidInputError

ACTOR_DRAFT = "draft"
ACTOR_VERIFY = "verify"

DRAFT_TOKEN = "draft_token"
VERIFY_ACCEPT = "verify_accept"
VERIFY_CORRECT = "verify_correct"
ROLLBACK = "rollback"
COMPLETE = "complete"

_VERIFY_STEP_KINDS = (VERIFY_ACCEPT, VERIFY_CORRECT)

CLOCK_WALL = "wall"
CLOCK_VIRTUAL = "virtual"

TRACE_CSV_COLUMNS = ["t_ms", "actor", "kind", "pos_lo", "pos_hi", "busy_ms", "draft_accepted"]
TIMELINE_CSV_COLUMNS = ["t_ms", "verified_tokens"]


@dataclass(frozen=True)
class TraceEvent:
    t_ms: float
    actor: str
    kind: str
    pos_lo: int
    pos_hi: int
    busy_ms: float = 0.0
    draft_accepted: int = 0

    @property
    def token_count(self) -> int:
        return self.pos_hi - self.pos_lo + 1


@dataclass
class DecodeTrace:
    """Timestamped event log of one decode run."""

    clock: str
    prompt_length: int
    events: list[TraceEvent] = field(default_factory=list)

    def validate(self) -> None:
        """Raise InvalidInputError unless this is a well-formed, complete trace."""
        if not self.events:
            raise InvalidInputError("trace has no events")
        completes = [e for e in self.events if e.kind == COMPLETE]
        if len(completes) != 1 or self.events[-1].kind != COMPLETE:
            raise InvalidInputError("trace must end with exactly one complete event")
        last_t = 0.0
        pending_correction = False
        for event in self.events:
            if event.t_ms < last_t - 1e-9:
                raise InvalidInputError("trace timestamps must be non-decreasing")
            last_t = max(last_t, event.t_ms)
            if event.kind in _VERIFY_STEP_KINDS and pending_correction:
                raise InvalidInputError(
                    "verify event before the pending correction was rolled back"
                )
            if event.kind == VERIFY_CORRECT:
                pending_correction = True
            elif event.kind == ROLLBACK:
                if not pending_correction:
                    raise InvalidInputError("rollback without a preceding correction")
                pending_correction = False
        # A correction may stay unacknowledged only when completion ends the
        # run, which the tail complete-event check above already pins down.


class TraceRecorder:
    """Per-actor append-only event logs, merged into one trace at completion.

    ``clock`` supplies wall timestamps (ms since run start); the simulator
    passes explicit virtual timestamps to :meth:`record` instead.
    """

    def __init__(
        self,
        clock_kind: str,
        prompt_length: int,
        clock: Callable[[], float] | None = None,
    ) -> None:
        self.clock_kind = clock_kind
        self.prompt_length = prompt_length
        self._clock = clock
        self._logs: dict[str, list[tuple[float, int, TraceEvent]]] = {}
        self._seq = itertools.count()

    def record(
        self,
        actor: str,
        kind: str,
        pos_lo: int,
        pos_hi: int,
        busy_ms: float = 0.0,
        draft_accepted: int = 0,
        t_ms: float | None = None,
    ) -> None:
        if t_ms is None:
            if self._clock is None:
                raise InvalidInputError("recorder has no clock; pass t_ms explicitly")
            t_ms = self._clock()
        event = TraceEvent(t_ms, actor, kind, pos_lo, pos_hi, busy_ms, draft_accepted)
        self._logs.setdefault(actor, []).append((t_ms, next(self._seq), event))

    def build(self) -> DecodeTrace:
        """Merge the per-actor logs into one protocol-ordered trace.

        Timestamps decide the interleaving except around the handshake: an
        acknowledgment sits strictly between its correction and the next
        verify event, whatever two wall clocks sampled on two threads say
        (the skew is a few microseconds; virtual clocks never disagree).
        Timestamps are clamped non-decreasing after reordering.
        """
        draft_log = self._logs.get(ACTOR_DRAFT, [])
        verify_log = self._logs.get(ACTOR_VERIFY, [])
        events: list[TraceEvent] = []
        pending_correction = False
        last_t = 0.0
        i = j = 0
        while i < len(draft_log) or j < len(verify_log):
            if i >= len(draft_log):
                take_draft = False
            elif j >= len(verify_log):
                take_draft = True
            elif draft_log[i][2].kind == ROLLBACK:
                take_draft = pending_correction
            else:
                take_draft = draft_log[i][:2] < verify_log[j][:2]
            if take_draft:
                _, _, event = draft_log[i]
                i += 1
            else:
                _, _, event = verify_log[j]
                j += 1
            if event.kind == VERIFY_CORRECT:
                pending_correction = True
            elif event.kind == ROLLBACK:
                pending_correction = False
            if event.t_ms < last_t:
                event = replace(event, t_ms=last_t)
            last_t = event.t_ms
            events.append(event)
        return DecodeTrace(
            clock=self.clock_kind, prompt_length=self.prompt_length, events=events
        )


@dataclass(frozen=True)
class DecodeStats:
    """Summary statistics of one decode run."""

    clock: str
    generated_tokens: int
    total_ms: float
    mean_ms_per_token: float
    verify_steps: int
    accepted_per_verify_step: float
    rollbacks: int
    drafted_tokens: int
    wasted_draft_tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(trace: DecodeTrace) -> DecodeStats:
    """Compute run statistics from a complete trace."""
    trace.validate()
    complete = trace.events[-1]
    generated = complete.pos_hi - trace.prompt_length
    if generated < 1:
        raise InvalidInputError("complete trace reports no generated tokens")
    total_ms = complete.t_ms
    verify_events = [e for e in trace.events if e.kind in _VERIFY_STEP_KINDS]
    steps = len(verify_events)
    published = sum(e.token_count for e in verify_events)
    rollback_events = [e for e in trace.events if e.kind == ROLLBACK]
    drafted = sum(1 for e in trace.events if e.kind == DRAFT_TOKEN)
    wasted = sum(e.token_count for e in rollback_events)
    return DecodeStats(
        clock=trace.clock,
        generated_tokens=generated,
        total_ms=total_ms,
        mean_ms_per_token=total_ms / generated,
        verify_steps=steps,
        accepted_per_verify_step=published / steps if steps else 0.0,
        rollbacks=sum(1 for e in verify_events if e.kind == VERIFY_CORRECT),
        drafted_tokens=drafted,
        wasted_draft_tokens=wasted,
    )


# --------------------------------------------------------------------------- #
# Comparison reports
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    mean_ms_per_token: float
    speedup: float


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    rows: list[ComparisonRow]

    def to_records(self) -> list[dict]:
        return [asdict(row) for row in self.rows]

    def to_text(self) -> str:
        width = max(len("strategy"), max(len(r.label) for r in self.rows))
        lines = [f"{'strategy':<{width}}  {'mean ms/token':>14}  {'speedup':>8}"]
        for row in self.rows:
            lines.append(
                f"{row.label:<{width}}  {row.mean_ms_per_token:>14.3f}  {row.speedup:>7.2f}x"
            )
        return "\n".join(lines)


def compare_runs(entries: Sequence[tuple[str, DecodeStats]]) -> ComparisonTable:
    """Speedup table relative to the first entry (the baseline)."""
    if len(entries) == 0:
        raise InvalidInputError("compare_runs requires at least one entry")
    if len(entries) < 2:
        raise InvalidInputError("compare_runs requires at least two entries")
    baseline_label, baseline_stats = entries[0]
    base_mean = baseline_stats.mean_ms_per_token
    rows = [
        ComparisonRow(label, stats.mean_ms_per_token, base_mean / stats.mean_ms_per_token)
        for label, stats in entries
    ]
    return ComparisonTable(baseline=baseline_label, rows=rows)


# --------------------------------------------------------------------------- #
# Timeline and busy-interval views
# --------------------------------------------------------------------------- #


def export_timeline(trace: DecodeTrace) -> list[tuple[float, int]]:
    """Cumulative verified tokens over time: (t_ms, verified_tokens) points.

    Starts at (0, 0); capped at the final generated-token count so a last
    batch that overshoots the length limit does not inflate the series.
    """
    trace.validate()
    generated = trace.events[-1].pos_hi - trace.prompt_length
    series: list[tuple[float, int]] = [(0.0, 0)]
    cumulative = 0
    for event in trace.events:
        if event.kind in _VERIFY_STEP_KINDS:
            cumulative = min(cumulative + event.token_count, generated)
            series.append((event.t_ms, cumulative))
    return series


def busy_intervals(trace: DecodeTrace, actor: str) -> list[tuple[float, float]]:
    """Merged [start, end] busy intervals for one actor."""
    raw = sorted(
        (e.t_ms - e.busy_ms, e.t_ms)
        for e in trace.events
        if e.actor == actor and e.busy_ms > 0.0
    )
    merged: list[tuple[float, float]] = []
    for start, end in raw:
        if merged and start <= merged[-1][1] + 1e-9:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def overlap_ms(a: list[tuple[float, float]], b: list[tuple[float, float]]) -> float:
    """Total length of the intersection of two merged interval lists."""
    total = 0.0
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return total


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #


def trace_to_csv(trace: DecodeTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_CSV_COLUMNS)
    for e in trace.events:
        writer.writerow(
            [repr(e.t_ms), e.actor, e.kind, e.pos_lo, e.pos_hi, repr(e.busy_ms), e.draft_accepted]
        )
    return buf.getvalue()


def write_trace_csv(trace: DecodeTrace, path: str | Path) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8")


def read_trace_csv(path: str | Path, clock: str, prompt_length: int) -> DecodeTrace:
    """Rebuild a trace from an event CSV written by :func:`write_trace_csv`."""
    events: list[TraceEvent] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_CSV_COLUMNS:
            raise InvalidInputError(f"unexpected trace CSV header in {path}: {header}")
        for row in reader:
            t_ms, actor, kind, pos_lo, pos_hi, busy_ms, accepted = row
            events.append(
                TraceEvent(
                    float(t_ms), actor, kind, int(pos_lo), int(pos_hi), float(busy_ms), int(accepted)
                )
            )
    return DecodeTrace(clock=clock, prompt_length=prompt_length, events=events)


def timeline_to_csv(series: list[tuple[float, int]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TIMELINE_CSV_COLUMNS)
    for t_ms, count in series:
        writer.writerow([repr(t_ms), count])
    return buf.getvalue()


def write_timeline_csv(series: list[tuple[float, int]], path: str | Path) -> None:
    Path(path).write_text(timeline_to_csv(series), encoding="utf-8")


def timeline_to_json(series: list[tuple[float, int]]) -> str:
    return json.dumps(
        [{"t_ms": t_ms, "verified_tokens": count} for t_ms, count in series],
        sort_keys=True,
    )
