"""The three decoding strategies over a shared verify-model greedy path.

* :func:`decode_autoregressive` -- one verify-model forward per token; the
  reference oracle every other engine must match token-for-token.
* :func:`decode_speculative_sync` -- classic alternating rounds: draft ``k``
  tokens, verify the batch, accept the matched prefix plus one verify-model
  token (a correction on mismatch, a bonus continuation on full match).
* :func:`decode_speculative_async` -- draft and verify loops running
  concurrently against a :class:`~specdec.coordination.SharedDecodeState`,
  with rollback-based recovery on mismatch and no bonus token.

The async engine is built from two step functions, ``draft_loop_step`` and
``verify_loop_step``, that contain the whole protocol; they are driven
either by :class:`ThreadExecutor` (two worker threads, wall clock) or by
the virtual-clock executor in :mod:`specdec.simulator`. Timing must never
change token output: all three strategies return identical sequences for
identical (verify model, prompt, limits).
"""

from __future__ import annotations

import enum
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .coordination import RollbackRequest, SharedDecodeState
from .errors import InvalidInputError
from .metrics import (
    ACTOR_DRAFT,
    ACTOR_VERIFY,
    CLOCK_WALL,
    COMPLETE,
    DRAFT_TOKEN,
    ROLLBACK,
    VERIFY_ACCEPT,
    VERIFY_CORRECT,
    DecodeStats,
    DecodeTrace,
    TraceRecorder,
    summarize,
)
from .models import MockModel, ModelState

FINISHED_BY_EOS = "eos"
FINISHED_BY_LENGTH = "length_limit"


@dataclass(frozen=True)
class DecodeConfig:
    """Run limits shared by all strategies.

    ``draft_window_k`` applies only to the synchronous engine;
    ``max_draft_lead`` (when set) idles the async draft loop once it runs
    that many tokens ahead of the verified frontier. Neither affects output.
    """

    max_new_tokens: int
    draft_window_k: int = 4
    max_draft_lead: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise InvalidInputError(
                f"max_new_tokens must be >= 1, got {self.max_new_tokens}"
            )
        if self.draft_window_k < 1:
            raise InvalidInputError(
                f"draft_window_k must be >= 1, got {self.draft_window_k}"
            )
        if self.max_draft_lead is not None and self.max_draft_lead < 1:
            raise InvalidInputError(
                f"max_draft_lead must be >= 1 when set, got {self.max_draft_lead}"
            )


@dataclass(frozen=True)
class DecodeResult:
    """Generated tokens (prompt excluded), termination cause, and run stats."""

    tokens: list[int]
    finished_by: str
    stats: DecodeStats
    trace: DecodeTrace


def find_mismatch(candidates: Sequence[int], predictions: Sequence[int]) -> int | None:
    """Smallest 1-based index where the sequences differ, or None."""
    if len(candidates) != len(predictions):
        raise InvalidInputError(
            f"length mismatch: {len(candidates)} candidates vs {len(predictions)} predictions"
        )
    for i, (cand, pred) in enumerate(zip(candidates, predictions)):
        if cand != pred:
            return i + 1
    return None


def finalize_tokens(verified: Sequence[int], eos_token: int, max_new_tokens: int) -> tuple[list[int], str]:
    """Trim a verified stream to the run's result.

    The first eos within the length limit ends the result there; tokens
    published after it (same verified batch) are discarded. Otherwise the
    result is capped at ``max_new_tokens``.
    """
    capped = list(verified[:max_new_tokens])
    if eos_token in capped:
        return capped[: capped.index(eos_token) + 1], FINISHED_BY_EOS
    return capped, FINISHED_BY_LENGTH


# --------------------------------------------------------------------------- #
# Serial steppers (shared by wall-clock runs and the simulator)
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class StepUnit:
    """One unit of model work performed by a serial engine.

    ``batch`` is the forward-pass size the unit occupies its actor with
    (one token for a draft step, the candidate-window size for a verify
    round); the simulator prices units with it.
    """

    actor: str
    kind: str
    pos_lo: int
    pos_hi: int
    batch: int
    draft_accepted: int = 0
    completed: bool = False


class AutoregressiveStepper:
    """One verify-model token per step; the oracle path."""

    def __init__(self, verify_model: MockModel, prompt: Sequence[int], config: DecodeConfig) -> None:
        self.model = verify_model
        self.config = config
        self.state = verify_model.init_state(prompt)
        self.prompt_length = len(prompt)
        self.verified: list[int] = []
        self.done = False

    def next_unit(self) -> StepUnit:
        assert not self.done
        token = self.model.next_token(self.state)
        self.model.advance(self.state, [token])
        self.verified.append(token)
        position = self.prompt_length + len(self.verified)
        self.done = token == self.model.eos_token or len(self.verified) >= self.config.max_new_tokens
        return StepUnit(ACTOR_VERIFY, VERIFY_ACCEPT, position, position, batch=1, completed=self.done)


class SyncSpeculativeStepper:
    """Alternating draft/verify rounds with correction or bonus acceptance.

    Each round drafts ``min(k, tokens remaining)`` candidates one at a time,
    verifies them in one batch, and accepts the matched prefix plus one
    verify-model token. On mismatch the draft state is cropped back to the
    verified frontier and re-fed the accepted tokens, which yields an extra
    ``rollback`` unit so resynchronization cost and wasted work are visible
    in traces.
    """

    def __init__(
        self,
        draft_model: MockModel,
        verify_model: MockModel,
        prompt: Sequence[int],
        config: DecodeConfig,
    ) -> None:
        self.draft_model = draft_model
        self.verify_model = verify_model
        self.config = config
        self.draft_state = draft_model.init_state(prompt)
        self.verify_state = verify_model.init_state(prompt)
        self.prompt_length = len(prompt)
        self.verified: list[int] = []
        self.done = False
        self._candidates: list[int] = []
        self._round_k = self._next_round_k()
        self._pending: deque[StepUnit] = deque()

    def _next_round_k(self) -> int:
        return min(self.config.draft_window_k, self.config.max_new_tokens - len(self.verified))

    def next_unit(self) -> StepUnit:
        assert not self.done
        if self._pending:
            unit = self._pending.popleft()
        elif len(self._candidates) < self._round_k:
            unit = self._draft_one()
        else:
            unit = self._verify_round()
        self.done = unit.completed and not self._pending
        return unit

    def _draft_one(self) -> StepUnit:
        token = self.draft_model.next_token(self.draft_state)
        self.draft_model.advance(self.draft_state, [token])
        self._candidates.append(token)
        position = self.prompt_length + len(self.verified) + len(self._candidates)
        return StepUnit(ACTOR_DRAFT, DRAFT_TOKEN, position, position, batch=1)

    def _verify_round(self) -> StepUnit:
        candidates = self._candidates
        frontier = self.prompt_length + len(self.verified)
        predictions = self.verify_model.verify_tokens(self.verify_state, candidates)
        mismatch = find_mismatch(candidates, predictions)
        if mismatch is None:
            self.verify_model.advance(self.verify_state, candidates)
            bonus = self.verify_model.next_token(self.verify_state)
            self.verify_model.advance(self.verify_state, [bonus])
            accepted = candidates + [bonus]
            self.draft_model.advance(self.draft_state, [bonus])
            kind = VERIFY_ACCEPT
            matched = len(candidates)
        else:
            accepted = candidates[: mismatch - 1] + [predictions[mismatch - 1]]
            self.verify_model.advance(self.verify_state, accepted)
            self.draft_model.rollback(self.draft_state, frontier)
            self.draft_model.advance(self.draft_state, accepted)
            kind = VERIFY_CORRECT
            matched = mismatch - 1
        self.verified.extend(accepted)
        completed = (
            self.verify_model.eos_token in accepted
            or len(self.verified) >= self.config.max_new_tokens
        )
        unit = StepUnit(
            ACTOR_VERIFY,
            kind,
            frontier + 1,
            frontier + len(accepted),
            batch=len(candidates),
            draft_accepted=matched,
            completed=completed,
        )
        if mismatch is not None and not completed:
            # Cropped positions: the rejected candidate through the last drafted one.
            self._pending.append(
                StepUnit(
                    ACTOR_DRAFT,
                    ROLLBACK,
                    frontier + mismatch,
                    frontier + len(candidates),
                    batch=0,
                )
            )
        self._candidates = []
        if not completed:
            self._round_k = self._next_round_k()
        return unit


def _run_serial_wall(stepper, prompt_length: int, eos_token: int, config: DecodeConfig) -> tuple[list[int], str, DecodeTrace]:
    start = time.perf_counter()
    clock = lambda: (time.perf_counter() - start) * 1000.0
    recorder = TraceRecorder(CLOCK_WALL, prompt_length, clock=clock)
    while not stepper.done:
        t0 = clock()
        unit = stepper.next_unit()
        recorder.record(
            unit.actor, unit.kind, unit.pos_lo, unit.pos_hi,
            busy_ms=clock() - t0, draft_accepted=unit.draft_accepted,
        )
    tokens, finished_by = finalize_tokens(stepper.verified, eos_token, config.max_new_tokens)
    final = prompt_length + len(tokens)
    recorder.record(ACTOR_VERIFY, COMPLETE, final, final)
    return tokens, finished_by, recorder.build()


def decode_autoregressive(
    verify_model: MockModel, prompt: Sequence[int], config: DecodeConfig
) -> DecodeResult:
    """Greedy one-token-at-a-time decoding on the verify model (the oracle)."""
    stepper = AutoregressiveStepper(verify_model, prompt, config)
    tokens, finished_by, trace = _run_serial_wall(
        stepper, len(prompt), verify_model.eos_token, config
    )
    return DecodeResult(tokens, finished_by, summarize(trace), trace)


def decode_speculative_sync(
    draft_model: MockModel,
    verify_model: MockModel,
    prompt: Sequence[int],
    config: DecodeConfig,
) -> DecodeResult:
    """Synchronous speculative decoding; output equals the autoregressive path."""
    stepper = SyncSpeculativeStepper(draft_model, verify_model, prompt, config)
    tokens, finished_by, trace = _run_serial_wall(
        stepper, len(prompt), verify_model.eos_token, config
    )
    return DecodeResult(tokens, finished_by, summarize(trace), trace)


# --------------------------------------------------------------------------- #
# Asynchronous engine: loop step functions
# --------------------------------------------------------------------------- #


class DraftStepOutcome(enum.Enum):
    GENERATED = "generated"
    ROLLED_BACK = "rolled_back"
    IDLE = "idle"
    STOPPED = "stopped"


class VerifyStepKind(enum.Enum):
    ACCEPTED = "accepted"
    CORRECTED = "corrected"
    IDLE = "idle"
    DONE = "done"


@dataclass(frozen=True)
class VerifyStepResult:
    kind: VerifyStepKind
    published: int = 0
    matched: int = 0
    window_size: int = 0
    corrected: bool = False


def draft_loop_step(
    shared: SharedDecodeState, draft_model: MockModel, draft_state: ModelState
) -> DraftStepOutcome:
    """One iteration of the draft loop.

    Priority per iteration: completion beats a pending rollback beats the
    lead cap beats generation. The rollback check thus lands between token
    generations, and a correction raised while a token was being computed is
    honored before anything newer is published.
    """
    if shared.is_complete():
        return DraftStepOutcome.STOPPED
    if shared.rollback_pending():
        shared.acknowledge_rollback(draft_model, draft_state)
        return DraftStepOutcome.ROLLED_BACK
    if shared.lead_capped:
        return DraftStepOutcome.IDLE
    token = draft_model.next_token(draft_state)
    draft_model.advance(draft_state, [token])
    shared.publish_draft_token(token)
    return DraftStepOutcome.GENERATED


def verify_loop_step(
    shared: SharedDecodeState,
    verify_model: MockModel,
    verify_state: ModelState,
    window: list[int] | None = None,
) -> VerifyStepResult:
    """One iteration of the verify loop.

    Reads the draft window (or verifies a pre-observed snapshot passed by
    the simulator), accepts the matched prefix, and on mismatch publishes
    the correction token and raises the rollback request. Completion is
    signaled when eos was published or the verified stream reached the
    token limit; no bonus token is harvested on a full match.

    Must not be called while a rollback is pending: the coordination layer
    raises ProtocolViolationError if that discipline is broken.
    """
    if window is None:
        window = shared.read_draft_window()
    if not window:
        return VerifyStepResult(VerifyStepKind.IDLE)
    predictions = verify_model.verify_tokens(verify_state, window)
    mismatch = find_mismatch(window, predictions)
    if mismatch is None:
        accepted = list(window)
        matched = len(window)
    else:
        accepted = window[: mismatch - 1] + [predictions[mismatch - 1]]
        matched = mismatch - 1
    verify_model.advance(verify_state, accepted)
    shared.publish_verified(accepted)
    if mismatch is not None:
        shared.request_rollback(RollbackRequest(target=shared.p_v, correction_token=accepted[-1]))
    done = (
        verify_model.eos_token in accepted
        or shared.verified_count >= shared.max_new_tokens
    )
    if done:
        shared.signal_completion()
    return VerifyStepResult(
        kind=VerifyStepKind.DONE if done else
        (VerifyStepKind.CORRECTED if mismatch is not None else VerifyStepKind.ACCEPTED),
        published=len(accepted),
        matched=matched,
        window_size=len(window),
        corrected=mismatch is not None,
    )


# --------------------------------------------------------------------------- #
# Concurrent executor
# --------------------------------------------------------------------------- #


@dataclass
class ThreadExecutor:
    """Runs the draft and verify loops on two polling worker threads.

    ``poll_jitter_ms`` adds a random sleep (seeded; uniform in
    [0, poll_jitter_ms]) at idle/await points and before each step, to
    shake out interleavings in stress tests. ``sleep_latency`` optionally
    injects real sleeps matching a latency model so wall-clock runs
    approximate simulated timings. Neither knob may change token output.
    """

    poll_jitter_ms: float = 0.0
    jitter_seed: int = 0
    sleep_latency: "object | None" = None  # simulator.LatencyModel, kept untyped to avoid a cycle

    def run(
        self,
        shared: SharedDecodeState,
        draft_model: MockModel,
        draft_state: ModelState,
        verify_model: MockModel,
        verify_state: ModelState,
        config: DecodeConfig,
    ) -> DecodeTrace:
        start = time.perf_counter()
        clock = lambda: (time.perf_counter() - start) * 1000.0
        recorder = TraceRecorder(CLOCK_WALL, shared.prompt_length, clock=clock)
        errors: list[BaseException] = []
        failed = threading.Event()

        def guard(worker):
            def wrapped() -> None:
                try:
                    worker()
                except BaseException as exc:  # propagate to the orchestrator
                    errors.append(exc)
                    failed.set()
            return wrapped

        draft_thread = threading.Thread(
            target=guard(self._draft_worker(shared, draft_model, draft_state, recorder, clock, failed)),
            name="specdec-draft",
        )
        verify_thread = threading.Thread(
            target=guard(self._verify_worker(shared, verify_model, verify_state, config, recorder, clock, failed)),
            name="specdec-verify",
        )
        draft_thread.start()
        verify_thread.start()
        draft_thread.join()
        verify_thread.join()
        if errors:
            raise errors[0]
        return recorder.build()

    def _make_sleeper(self, salt: int):
        if self.poll_jitter_ms > 0.0:
            rng = random.Random((self.jitter_seed << 1) ^ salt)
            jitter = self.poll_jitter_ms / 1000.0
            return lambda: time.sleep(rng.uniform(0.0, jitter))
        return lambda: time.sleep(0)

    def _draft_worker(self, shared, model, state, recorder, clock, failed):
        sleeper = self._make_sleeper(0x0D)
        latency = self.sleep_latency

        def worker() -> None:
            while not failed.is_set():
                sleeper()
                if latency is not None and not shared.rollback_pending() and not shared.is_complete():
                    time.sleep(latency.draft_forward_ms(1) / 1000.0)
                t0 = clock()
                p_d_before = shared.p_d
                outcome = draft_loop_step(shared, model, state)
                if outcome is DraftStepOutcome.STOPPED:
                    break
                if outcome is DraftStepOutcome.GENERATED:
                    recorder.record(
                        ACTOR_DRAFT, DRAFT_TOKEN, shared.p_d, shared.p_d, busy_ms=clock() - t0
                    )
                elif outcome is DraftStepOutcome.ROLLED_BACK:
                    recorder.record(
                        ACTOR_DRAFT, ROLLBACK, shared.p_d, p_d_before, busy_ms=clock() - t0
                    )
                # IDLE falls through to the next poll.

        return worker

    def _verify_worker(self, shared, model, state, config, recorder, clock, failed):
        sleeper = self._make_sleeper(0x5E)
        latency = self.sleep_latency

        def worker() -> None:
            while not failed.is_set():
                sleeper()
                if shared.rollback_pending():
                    continue
                if latency is not None:
                    pending = shared.draft_lead
                    if pending > 0:
                        time.sleep(latency.verify_forward_ms(pending) / 1000.0)
                t0 = clock()
                p_v_before = shared.p_v
                result = verify_loop_step(shared, model, state)
                if result.kind is VerifyStepKind.IDLE:
                    continue
                recorder.record(
                    ACTOR_VERIFY,
                    VERIFY_CORRECT if result.corrected else VERIFY_ACCEPT,
                    p_v_before + 1,
                    shared.p_v,
                    busy_ms=clock() - t0,
                    draft_accepted=result.matched,
                )
                if result.kind is VerifyStepKind.DONE:
                    tokens, _ = finalize_tokens(
                        shared.verified_tokens(), model.eos_token, config.max_new_tokens
                    )
                    final = shared.prompt_length + len(tokens)
                    recorder.record(ACTOR_VERIFY, COMPLETE, final, final)
                    break

        return worker


def decode_speculative_async(
    draft_model: MockModel,
    verify_model: MockModel,
    prompt: Sequence[int],
    config: DecodeConfig,
    executor=None,
) -> DecodeResult:
    """Fully asynchronous speculative decoding.

    ``executor`` supplies the backend: a :class:`ThreadExecutor` (default)
    for real concurrency, or the simulator's virtual-clock executor for
    deterministic interleaving. Token output is identical either way and
    equals :func:`decode_autoregressive` on the verify model.
    """
    if executor is None:
        executor = ThreadExecutor()
    shared = SharedDecodeState(
        prompt_length=len(prompt),
        max_new_tokens=config.max_new_tokens,
        max_draft_lead=config.max_draft_lead,
    )
    draft_state = draft_model.init_state(prompt)
    verify_state = verify_model.init_state(prompt)
    trace = executor.run(shared, draft_model, draft_state, verify_model, verify_state, config)
    tokens, finished_by = finalize_tokens(
        shared.verified_tokens(), verify_model.eos_token, config.max_new_tokens
    )
    return DecodeResult(tokens, finished_by, summarize(trace), trace)
