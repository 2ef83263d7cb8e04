"""Metrics tests: summarization, comparison tables, timeline export, serialization."""

from __future__ import annotations

import math

import pytest

from specdec import (
    ACTOR_DRAFT,
    ACTOR_VERIFY,
    DecodeConfig,
    DecodeTrace,
    InvalidInputError,
    TraceEvent,
    compare_runs,
    export_timeline,
    make_agreement_pair,
    simulate,
    summarize,
)
from specdec.metrics import (
    read_trace_csv,
    timeline_to_csv,
    trace_to_csv,
    write_trace_csv,
)

PROMPT = [1, 2, 3, 4]


def _pair(rho: float, seed: int = 11):
    return make_agreement_pair(seed=seed, rho=rho, vocab_size=5000, eos_token=0, exclude_eos=True)


def _sim(kind: str, rho: float, n: int, k: int = 4):
    draft, verify = _pair(rho)
    config = DecodeConfig(max_new_tokens=n, draft_window_k=k)
    return simulate(kind, draft, verify, PROMPT, config)


class TestSummarize:
    def test_autoregressive_12_tokens_in_300ms(self):
        result, trace = _sim("autoregressive", 1.0, 12)
        stats = summarize(trace)
        assert stats.total_ms == 300.0
        assert stats.generated_tokens == 12
        assert stats.mean_ms_per_token == 25.0
        assert stats.clock == "virtual"

    def test_full_agreement_async_has_no_waste(self):
        result, trace = _sim("async_speculative", 1.0, 50)
        stats = summarize(trace)
        assert stats.rollbacks == 0
        assert stats.wasted_draft_tokens == 0

    def test_zero_agreement_async_degenerate_counts(self):
        n = 30
        result, trace = _sim("async_speculative", 0.0, n)
        stats = summarize(trace)
        assert stats.verify_steps == n
        assert stats.accepted_per_verify_step == 1.0
        assert stats.rollbacks == n

    def test_sync_full_agreement_accepts_k_plus_one(self):
        result, trace = _sim("sync_speculative", 1.0, 20, k=4)
        stats = summarize(trace)
        assert stats.accepted_per_verify_step == 5.0

    def test_generated_tokens_matches_result(self):
        for kind in ("autoregressive", "sync_speculative", "async_speculative"):
            result, trace = _sim(kind, 0.8, 33)
            assert summarize(trace).generated_tokens == len(result.tokens)

    def test_stats_are_pure_functions_of_traces(self):
        _, trace = _sim("async_speculative", 0.5, 25)
        assert summarize(trace) == summarize(trace)

    def test_mean_is_total_over_generated(self):
        _, trace = _sim("async_speculative", 0.8, 40)
        stats = summarize(trace)
        assert math.isclose(stats.mean_ms_per_token, stats.total_ms / stats.generated_tokens)

    def test_accepted_draft_never_exceeds_drafted(self):
        for rho in (0.0, 0.5, 1.0):
            _, trace = _sim("async_speculative", rho, 40)
            accepted = sum(e.draft_accepted for e in trace.events)
            assert accepted <= summarize(trace).drafted_tokens

    def test_incomplete_trace_rejected(self):
        trace = DecodeTrace(
            clock="virtual",
            prompt_length=4,
            events=[TraceEvent(25.0, ACTOR_VERIFY, "verify_accept", 5, 5)],
        )
        with pytest.raises(InvalidInputError):
            summarize(trace)

    def test_correction_without_rollback_rejected(self):
        events = [
            TraceEvent(10.0, ACTOR_VERIFY, "verify_correct", 5, 5),
            TraceEvent(20.0, ACTOR_VERIFY, "verify_accept", 6, 6),
            TraceEvent(20.0, ACTOR_VERIFY, "complete", 6, 6),
        ]
        trace = DecodeTrace(clock="virtual", prompt_length=4, events=events)
        with pytest.raises(InvalidInputError):
            summarize(trace)


class TestRecorderMerge:
    def test_wall_clock_skew_cannot_misorder_the_handshake(self):
        # Two threads may record an acknowledgment with a timestamp a few
        # microseconds before the correction that caused it; the merged
        # trace must still read correction -> rollback with monotone times.
        from specdec import TraceRecorder

        recorder = TraceRecorder("wall", prompt_length=4)
        recorder.record(ACTOR_DRAFT, "draft_token", 5, 5, t_ms=1.0)
        recorder.record(ACTOR_DRAFT, "rollback", 5, 5, t_ms=2.001)  # ack, skewed early
        recorder.record(ACTOR_VERIFY, "verify_correct", 5, 5, t_ms=2.003)
        recorder.record(ACTOR_VERIFY, "verify_accept", 6, 6, t_ms=3.0)
        recorder.record(ACTOR_VERIFY, "complete", 6, 6, t_ms=3.0)
        trace = recorder.build()
        kinds = [e.kind for e in trace.events]
        assert kinds == ["draft_token", "verify_correct", "rollback", "verify_accept", "complete"]
        times = [e.t_ms for e in trace.events]
        assert times == sorted(times)
        trace.validate()

    def test_post_ack_correction_stays_after_the_rollback(self):
        # The converse skew: a later correction recorded before the previous
        # acknowledgment must not jump the queue.
        from specdec import TraceRecorder

        recorder = TraceRecorder("wall", prompt_length=4)
        recorder.record(ACTOR_VERIFY, "verify_correct", 5, 5, t_ms=1.0)
        recorder.record(ACTOR_VERIFY, "verify_correct", 6, 6, t_ms=2.000)  # post-ack, skewed early
        recorder.record(ACTOR_VERIFY, "complete", 6, 6, t_ms=3.0)
        recorder.record(ACTOR_DRAFT, "rollback", 5, 5, t_ms=2.002)
        recorder.record(ACTOR_DRAFT, "rollback", 6, 6, t_ms=2.9)
        trace = recorder.build()
        kinds = [e.kind for e in trace.events]
        assert kinds == ["verify_correct", "rollback", "verify_correct", "rollback", "complete"]
        trace.validate()


class TestCompareRuns:
    def test_speedup_values(self):
        _, ar_trace = _sim("autoregressive", 1.0, 20)
        _, sync_trace = _sim("sync_speculative", 1.0, 20)
        table = compare_runs(
            [("autoregressive", summarize(ar_trace)), ("sync", summarize(sync_trace))]
        )
        assert table.rows[0].speedup == 1.0
        # 25 ms/token over 13 ms/token.
        assert round(table.rows[1].speedup, 2) == 1.92

    def test_baseline_against_itself(self):
        _, trace = _sim("autoregressive", 1.0, 10)
        stats = summarize(trace)
        table = compare_runs([("a", stats), ("b", stats)])
        assert table.rows[1].speedup == 1.0

    def test_default_config_ordering(self):
        _, ar = _sim("autoregressive", 0.8, 128)
        _, sync = _sim("sync_speculative", 0.8, 128)
        _, asynchronous = _sim("async_speculative", 0.8, 128)
        table = compare_runs(
            [
                ("autoregressive", summarize(ar)),
                ("sync", summarize(sync)),
                ("async", summarize(asynchronous)),
            ]
        )
        speedups = {row.label: row.speedup for row in table.rows}
        assert speedups["async"] > speedups["sync"] > 1.0

    def test_text_table_is_aligned(self):
        _, ar = _sim("autoregressive", 1.0, 10)
        _, sync = _sim("sync_speculative", 1.0, 10)
        text = compare_runs(
            [("autoregressive", summarize(ar)), ("sync_speculative", summarize(sync))]
        ).to_text()
        lines = text.splitlines()
        assert len(lines) == 3
        assert len({len(line) for line in lines}) == 1

    def test_too_few_entries_rejected(self):
        with pytest.raises(InvalidInputError):
            compare_runs([])
        _, trace = _sim("autoregressive", 1.0, 5)
        with pytest.raises(InvalidInputError):
            compare_runs([("only", summarize(trace))])


class TestTimeline:
    def test_autoregressive_series_is_linear(self):
        _, trace = _sim("autoregressive", 1.0, 10)
        series = export_timeline(trace)
        assert series[0] == (0.0, 0)
        assert series[1:] == [(25.0 * i, i) for i in range(1, 11)]

    def test_series_non_decreasing_and_ends_at_generated(self):
        result, trace = _sim("async_speculative", 0.6, 40)
        series = export_timeline(trace)
        assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(series, series[1:]))
        assert series[-1][1] == len(result.tokens)

    def test_async_reaches_target_before_sync(self):
        _, sync_trace = _sim("sync_speculative", 1.0, 60)
        _, async_trace = _sim("async_speculative", 1.0, 60)
        assert export_timeline(async_trace)[-1][0] < export_timeline(sync_trace)[-1][0]

    def test_csv_header(self):
        _, trace = _sim("autoregressive", 1.0, 3)
        text = timeline_to_csv(export_timeline(trace))
        assert text.splitlines()[0] == "t_ms,verified_tokens"


class TestSerialization:
    def test_trace_csv_round_trip(self, tmp_path):
        _, trace = _sim("async_speculative", 0.7, 25)
        path = tmp_path / "trace.csv"
        write_trace_csv(trace, path)
        loaded = read_trace_csv(path, trace.clock, trace.prompt_length)
        assert loaded.events == trace.events
        assert summarize(loaded) == summarize(trace)

    def test_trace_csv_header(self):
        _, trace = _sim("autoregressive", 1.0, 2)
        header = trace_to_csv(trace).splitlines()[0]
        assert header == "t_ms,actor,kind,pos_lo,pos_hi,busy_ms,draft_accepted"

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("nope\n1,2\n")
        with pytest.raises(InvalidInputError):
            read_trace_csv(path, "virtual", 4)
