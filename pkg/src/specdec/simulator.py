"""Deterministic virtual-clock executor for all three decoding strategies.

The simulator replays the exact step functions the engines use -- the
serial steppers and the async loop steps -- under a discrete event queue,
charging each forward pass a configurable cost instead of letting it take
real time. Identical inputs therefore produce an identical token stream
AND an identical timestamped trace; the only thing simulated is the clock.

Scheduling model for the asynchronous engine:

* The draft actor is occupied ``draft_forward_ms(1)`` per generated token.
* When the verify actor is free and the draft window is non-empty, it
  snapshots the window, is occupied ``verify_forward_ms(len(window))``,
  and publishes the verdict at completion. The snapshot taken at forward
  start is what gets verified, exactly as the concurrent backend reads the
  window once at the start of its step.
* A draft forward in flight when a rollback is requested runs to
  completion and is discarded (an accelerator kernel cannot be revoked);
  the acknowledgment lands ``rollback_overhead_ms`` later.
* Events at equal timestamps dispatch verify before draft (then FIFO), so
  a correction becomes visible before the next draft token is committed.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Sequence

from .coordination import SharedDecodeState
from .engines import (
    AutoregressiveStepper,
    DecodeConfig,
    DecodeResult,
    DraftStepOutcome,
    SyncSpeculativeStepper,
    VerifyStepKind,
    draft_loop_step,
    finalize_tokens,
    verify_loop_step,
)
from .errors import InvalidInputError, SimulatorError
from .metrics import (
    ACTOR_DRAFT,
    ACTOR_VERIFY,
    CLOCK_VIRTUAL,
    COMPLETE,
    DRAFT_TOKEN,
    ROLLBACK,
    VERIFY_ACCEPT,
    VERIFY_CORRECT,
    DecodeTrace,
    TraceRecorder,
    summarize,
)
from .models import MockModel, ModelState

ENGINE_AUTOREGRESSIVE = "autoregressive"
ENGINE_SYNC = "sync_speculative"
ENGINE_ASYNC = "async_speculative"
ENGINE_KINDS = (ENGINE_AUTOREGRESSIVE, ENGINE_SYNC, ENGINE_ASYNC)

FORWARD_DONE = "forward_done"
ROLLBACK_ACK = "rollback_ack"
COMPLETION = "completion"

_ACTOR_RANK = {ACTOR_VERIFY: 0, ACTOR_DRAFT: 1}


@dataclass(frozen=True)
class LatencyModel:
    """Per-forward-pass costs, in virtual milliseconds.

    A draft forward over ``b`` tokens costs ``draft_base_ms +
    draft_per_token_ms * b`` and likewise for verify. The defaults read the
    reference hardware figures (about 10 ms per draft token, 25 ms per
    verify forward) as flat forward-pass latencies: one batched verify
    forward costs roughly one forward pass, so ``verify_per_token_ms``
    defaults to zero. Both knobs are exposed for sensitivity sweeps.
    """

    draft_base_ms: float = 0.0
    draft_per_token_ms: float = 10.0
    verify_base_ms: float = 25.0
    verify_per_token_ms: float = 0.0
    rollback_overhead_ms: float = 0.0

    def __post_init__(self) -> None:
        for name in (
            "draft_base_ms",
            "draft_per_token_ms",
            "verify_base_ms",
            "verify_per_token_ms",
            "rollback_overhead_ms",
        ):
            if getattr(self, name) < 0.0:
                raise InvalidInputError(f"{name} must be non-negative")

    def draft_forward_ms(self, batch: int) -> float:
        return self.draft_base_ms + self.draft_per_token_ms * batch

    def verify_forward_ms(self, batch: int) -> float:
        return self.verify_base_ms + self.verify_per_token_ms * batch


@dataclass(frozen=True)
class SimEvent:
    """A scheduled completion instant for one actor's unit of work."""

    time_ms: float
    actor: str
    kind: str
    seq: int
    payload: object = None


class EventQueue:
    """Min-heap of events ordered by (time, verify-before-draft, insertion)."""

    def __init__(self) -> None:
        self._heap: list[tuple[float, int, int, SimEvent]] = []
        self._seq = 0

    def push(self, time_ms: float, actor: str, kind: str, payload: object = None) -> None:
        event = SimEvent(time_ms, actor, kind, self._seq, payload)
        heapq.heappush(self._heap, (time_ms, _ACTOR_RANK[actor], self._seq, event))
        self._seq += 1

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)[3]

    def empty(self) -> bool:
        return not self._heap


def virtual_clock_run(queue: EventQueue, dispatch: Callable[[SimEvent], None]) -> float:
    """Pop events in order, dispatching each, until the completion event.

    Returns the completion timestamp. An exhausted queue before completion
    is a simulator bug, not a data condition.
    """
    while True:
        if queue.empty():
            raise SimulatorError("event queue drained before completion was signaled")
        event = queue.pop()
        if event.kind == COMPLETION:
            return event.time_ms
        dispatch(event)


# --------------------------------------------------------------------------- #
# Serial engines under the virtual clock
# --------------------------------------------------------------------------- #


def _unit_cost(unit, latency: LatencyModel) -> float:
    if unit.kind == DRAFT_TOKEN:
        return latency.draft_forward_ms(unit.batch)
    if unit.kind == ROLLBACK:
        return latency.rollback_overhead_ms
    return latency.verify_forward_ms(unit.batch)


def _run_serial_sim(
    stepper, prompt_length: int, eos_token: int, config: DecodeConfig, latency: LatencyModel
) -> tuple[list[int], str, DecodeTrace]:
    recorder = TraceRecorder(CLOCK_VIRTUAL, prompt_length)
    queue = EventQueue()

    def schedule_next(now: float) -> None:
        unit = stepper.next_unit()
        queue.push(now + _unit_cost(unit, latency), unit.actor, FORWARD_DONE, payload=unit)

    def dispatch(event: SimEvent) -> None:
        unit = event.payload
        recorder.record(
            unit.actor,
            unit.kind,
            unit.pos_lo,
            unit.pos_hi,
            busy_ms=_unit_cost(unit, latency),
            draft_accepted=unit.draft_accepted,
            t_ms=event.time_ms,
        )
        if stepper.done:
            tokens, _ = finalize_tokens(stepper.verified, eos_token, config.max_new_tokens)
            final = prompt_length + len(tokens)
            recorder.record(ACTOR_VERIFY, COMPLETE, final, final, t_ms=event.time_ms)
            queue.push(event.time_ms, ACTOR_VERIFY, COMPLETION)
        else:
            schedule_next(event.time_ms)

    schedule_next(0.0)
    virtual_clock_run(queue, dispatch)
    tokens, finished_by = finalize_tokens(stepper.verified, eos_token, config.max_new_tokens)
    return tokens, finished_by, recorder.build()


# --------------------------------------------------------------------------- #
# Asynchronous engine under the virtual clock
# --------------------------------------------------------------------------- #

_DRAFT_RUNNING = "running"
_DRAFT_RECOVERING = "recovering"
_DRAFT_IDLE_CAPPED = "idle_capped"
_DRAFT_STOPPED = "stopped"

_VERIFY_BUSY = "busy"
_VERIFY_IDLE = "idle"
_VERIFY_AWAITING_ACK = "awaiting_ack"
_VERIFY_DONE = "done"


class _AsyncSimDriver:
    """Event handlers for the two async loops under the virtual clock."""

    def __init__(
        self,
        shared: SharedDecodeState,
        draft_model: MockModel,
        draft_state: ModelState,
        verify_model: MockModel,
        verify_state: ModelState,
        config: DecodeConfig,
        latency: LatencyModel,
    ) -> None:
        self.shared = shared
        self.draft_model = draft_model
        self.draft_state = draft_state
        self.verify_model = verify_model
        self.verify_state = verify_state
        self.config = config
        self.latency = latency
        self.queue = EventQueue()
        self.recorder = TraceRecorder(CLOCK_VIRTUAL, shared.prompt_length)
        self.draft_status = _DRAFT_RUNNING
        self.verify_status = _VERIFY_IDLE
        self._draft_busy_since = 0.0
        self._verify_busy_since = 0.0

    def run(self) -> DecodeTrace:
        self._start_draft_forward(0.0)
        virtual_clock_run(self.queue, self._dispatch)
        return self.recorder.build()

    def _dispatch(self, event: SimEvent) -> None:
        if event.actor == ACTOR_DRAFT:
            if event.kind == FORWARD_DONE:
                self._on_draft_forward_done(event.time_ms)
            elif event.kind == ROLLBACK_ACK:
                self._on_rollback_ack(event.time_ms)
            else:
                raise SimulatorError(f"unexpected draft event kind {event.kind}")
        else:
            if event.kind != FORWARD_DONE:
                raise SimulatorError(f"unexpected verify event kind {event.kind}")
            self._on_verify_forward_done(event.time_ms, event.payload)

    # ------------------------------------------------------------------ #
    # Actor starts
    # ------------------------------------------------------------------ #

    def _start_draft_forward(self, now: float) -> None:
        self.draft_status = _DRAFT_RUNNING
        self._draft_busy_since = now
        self.queue.push(now + self.latency.draft_forward_ms(1), ACTOR_DRAFT, FORWARD_DONE)

    def _start_verify_if_ready(self, now: float) -> None:
        window = self.shared.read_draft_window()
        if not window:
            self.verify_status = _VERIFY_IDLE
            return
        self.verify_status = _VERIFY_BUSY
        self._verify_busy_since = now
        self.queue.push(
            now + self.latency.verify_forward_ms(len(window)),
            ACTOR_VERIFY,
            FORWARD_DONE,
            payload=window,
        )

    # ------------------------------------------------------------------ #
    # Event handlers
    # ------------------------------------------------------------------ #

    def _on_draft_forward_done(self, now: float) -> None:
        if self.shared.is_complete():
            outcome = draft_loop_step(self.shared, self.draft_model, self.draft_state)
            assert outcome is DraftStepOutcome.STOPPED
            self.draft_status = _DRAFT_STOPPED
            return
        if self.shared.rollback_pending():
            # The token just computed is discarded; cropping takes the
            # configured overhead before the acknowledgment lands.
            self.draft_status = _DRAFT_RECOVERING
            self.queue.push(now + self.latency.rollback_overhead_ms, ACTOR_DRAFT, ROLLBACK_ACK)
            return
        outcome = draft_loop_step(self.shared, self.draft_model, self.draft_state)
        assert outcome is DraftStepOutcome.GENERATED
        self.recorder.record(
            ACTOR_DRAFT,
            DRAFT_TOKEN,
            self.shared.p_d,
            self.shared.p_d,
            busy_ms=now - self._draft_busy_since,
            t_ms=now,
        )
        if self.verify_status == _VERIFY_IDLE:
            self._start_verify_if_ready(now)
        if self.shared.lead_capped:
            self.draft_status = _DRAFT_IDLE_CAPPED
        else:
            self._start_draft_forward(now)

    def _on_rollback_ack(self, now: float) -> None:
        p_d_before = self.shared.p_d
        outcome = draft_loop_step(self.shared, self.draft_model, self.draft_state)
        if outcome is DraftStepOutcome.STOPPED:
            # Completion was signaled by the same verify step that raised
            # the rollback; the run is over before the draft recovers.
            self.draft_status = _DRAFT_STOPPED
            return
        assert outcome is DraftStepOutcome.ROLLED_BACK
        self.recorder.record(
            ACTOR_DRAFT,
            ROLLBACK,
            self.shared.p_d,
            p_d_before,
            busy_ms=now - self._draft_busy_since,
            t_ms=now,
        )
        # The ack leaves p_d == p_v, so the verify side necessarily idles
        # until the next draft token is published.
        self.verify_status = _VERIFY_IDLE
        self._start_draft_forward(now)

    def _on_verify_forward_done(self, now: float, window: list[int]) -> None:
        p_v_before = self.shared.p_v
        result = verify_loop_step(self.shared, self.verify_model, self.verify_state, window=window)
        assert result.kind is not VerifyStepKind.IDLE
        busy = now - self._verify_busy_since
        self.recorder.record(
            ACTOR_VERIFY,
            VERIFY_CORRECT if result.corrected else VERIFY_ACCEPT,
            p_v_before + 1,
            self.shared.p_v,
            busy_ms=busy,
            draft_accepted=result.matched,
            t_ms=now,
        )
        if result.kind is VerifyStepKind.DONE:
            tokens, _ = finalize_tokens(
                self.shared.verified_tokens(),
                self.verify_model.eos_token,
                self.config.max_new_tokens,
            )
            final = self.shared.prompt_length + len(tokens)
            self.recorder.record(ACTOR_VERIFY, COMPLETE, final, final, t_ms=now)
            self.verify_status = _VERIFY_DONE
            self.queue.push(now, ACTOR_VERIFY, COMPLETION)
            return
        if result.corrected:
            self.verify_status = _VERIFY_AWAITING_ACK
            if self.draft_status == _DRAFT_IDLE_CAPPED:
                # No forward in flight to wait out; the idle draft side
                # starts cropping as soon as it observes the request.
                self._draft_busy_since = now
                self.draft_status = _DRAFT_RECOVERING
                self.queue.push(
                    now + self.latency.rollback_overhead_ms, ACTOR_DRAFT, ROLLBACK_ACK
                )
            return
        if self.draft_status == _DRAFT_IDLE_CAPPED and not self.shared.lead_capped:
            self._start_draft_forward(now)
        self._start_verify_if_ready(now)


class SimulatedExecutor:
    """Virtual-clock backend for :func:`specdec.engines.decode_speculative_async`."""

    def __init__(self, latency: LatencyModel | None = None) -> None:
        self.latency = latency or LatencyModel()

    def run(
        self,
        shared: SharedDecodeState,
        draft_model: MockModel,
        draft_state: ModelState,
        verify_model: MockModel,
        verify_state: ModelState,
        config: DecodeConfig,
    ) -> DecodeTrace:
        driver = _AsyncSimDriver(
            shared, draft_model, draft_state, verify_model, verify_state, config, self.latency
        )
        return driver.run()


def simulate(
    engine_kind: str,
    draft_model: MockModel | None,
    verify_model: MockModel,
    prompt: Sequence[int],
    config: DecodeConfig,
    latency: LatencyModel | None = None,
) -> tuple[DecodeResult, DecodeTrace]:
    """Run one strategy under the virtual clock.

    Returns the decode result (identical tokens to the non-simulated run)
    plus the fully timestamped trace. ``draft_model`` may be None for the
    autoregressive engine.
    """
    latency = latency or LatencyModel()
    if engine_kind == ENGINE_AUTOREGRESSIVE:
        stepper = AutoregressiveStepper(verify_model, prompt, config)
    elif engine_kind == ENGINE_SYNC:
        if draft_model is None:
            raise InvalidInputError("sync_speculative requires a draft model")
        stepper = SyncSpeculativeStepper(draft_model, verify_model, prompt, config)
    elif engine_kind == ENGINE_ASYNC:
        if draft_model is None:
            raise InvalidInputError("async_speculative requires a draft model")
        from .engines import decode_speculative_async

        result = decode_speculative_async(
            draft_model, verify_model, prompt, config, executor=SimulatedExecutor(latency)
        )
        return result, result.trace
    else:
        raise InvalidInputError(f"unknown engine kind {engine_kind!r}; expected one of {ENGINE_KINDS}")
    tokens, finished_by, trace = _run_serial_sim(
        stepper, len(prompt), verify_model.eos_token, config, latency
    )
    result = DecodeResult(tokens, finished_by, summarize(trace), trace)
    return result, trace
