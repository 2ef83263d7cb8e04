"""Speculative decoding engines, deterministic mock models, and a virtual-clock simulator.

Three strategies produce identical token output for identical (verify model,
prompt, limits): plain autoregressive decoding, synchronous speculative
decoding, and a fully asynchronous draft/verify pipeline with rollback-based
recovery. A discrete-event simulator replays the same engine step functions
under a virtual clock for deterministic timing experiments.
"""

from .coordination import RollbackRequest, SharedDecodeState, TokenBuffer
from .engines import (
    DecodeConfig,
    DecodeResult,
    DraftStepOutcome,
    ThreadExecutor,
    VerifyStepKind,
    VerifyStepResult,
    decode_autoregressive,
    decode_speculative_async,
    decode_speculative_sync,
    draft_loop_step,
    find_mismatch,
    finalize_tokens,
    verify_loop_step,
)
from .errors import (
    ConfigError,
    InvalidInputError,
    InvalidRollbackError,
    ProtocolViolationError,
    SimulatorError,
    SpecDecError,
)
from .metrics import (
    ACTOR_DRAFT,
    ACTOR_VERIFY,
    DecodeStats,
    DecodeTrace,
    TraceEvent,
    TraceRecorder,
    busy_intervals,
    compare_runs,
    export_timeline,
    overlap_ms,
    summarize,
)
from .models import (
    AgreementDraftModel,
    HashChainModel,
    MockModel,
    ModelState,
    ScriptedModel,
    make_agreement_pair,
    splitmix64,
)
from .simulator import (
    ENGINE_ASYNC,
    ENGINE_AUTOREGRESSIVE,
    ENGINE_KINDS,
    ENGINE_SYNC,
    EventQueue,
    LatencyModel,
    SimEvent,
    SimulatedExecutor,
    simulate,
    virtual_clock_run,
)

__version__ = "0.1.0"

__all__ = [
    "ACTOR_DRAFT",
    "ACTOR_VERIFY",
    "AgreementDraftModel",
    "ConfigError",
    "DecodeConfig",
    "DecodeResult",
    "DecodeStats",
    "DecodeTrace",
    "DraftStepOutcome",
    "ENGINE_ASYNC",
    "ENGINE_AUTOREGRESSIVE",
    "ENGINE_KINDS",
    "ENGINE_SYNC",
    "EventQueue",
    "HashChainModel",
    "InvalidInputError",
    "InvalidRollbackError",
    "LatencyModel",
    "MockModel",
    "ModelState",
    "ProtocolViolationError",
    "RollbackRequest",
    "ScriptedModel",
    "SharedDecodeState",
    "SimEvent",
    "SimulatedExecutor",
    "SimulatorError",
    "SpecDecError",
    "ThreadExecutor",
    "TokenBuffer",
    "TraceEvent",
    "TraceRecorder",
    "VerifyStepKind",
    "VerifyStepResult",
    "busy_intervals",
    "compare_runs",
    "decode_autoregressive",
    "decode_speculative_async",
    "decode_speculative_sync",
    "draft_loop_step",
    "export_timeline",
    "find_mismatch",
    "finalize_tokens",
    "make_agreement_pair",
    "overlap_ms",
    "simulate",
    "splitmix64",
    "summarize",
    "verify_loop_step",
    "virtual_clock_run",
]
