"""Shared decode state and the publish/rollback handshake between loops.

The draft loop and the verify loop communicate exclusively through a
:class:`SharedDecodeState`: a draft buffer ``D``, a verify buffer ``V``,
their absolute frontier counters ``p_d`` and ``p_v``, a rollback request
slot, and a completion flag. No locks are used because every field has a
single writer:

* ``D`` and ``p_d`` are written only by the draft loop (including the
  truncation performed while acknowledging a rollback);
* ``V``, ``p_v``, the rollback request, and the completion flag are
  written only by the verify loop.

Publication ordering contract: tokens are appended to a buffer *before*
its frontier counter is bumped, so any reader that observes a counter
value ``n`` can read every token at positions ``<= n``. Under CPython the
GIL makes the append and the counter store individually atomic, which is
all the single-writer discipline requires. The same object also runs
single-threaded under the simulator's interleaved stepping.

Positions are absolute 1-based token counts: the prompt occupies positions
``1..prompt_length`` and the token stored at ``D[i]``/``V[i]`` sits at
absolute position ``prompt_length + 1 + i``.

Misuse of the handshake (verifying or publishing inside a pending rollback
window, double rollback requests) raises :class:`ProtocolViolationError`;
these are engine bugs, never data-dependent conditions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from .errors import InvalidInputError, ProtocolViolationError
from .models import MockModel, ModelState


class TokenBuffer:
    """Append-only token sequence with a single writer for its whole lifetime.

    The writer is identified by thread; the first mutating call claims the
    buffer and every later mutation must come from the same thread. Reads are
    allowed from anywhere. Truncation must be enabled explicitly -- only the
    draft buffer is ever truncated (by the rollback acknowledgment).
    """

    def __init__(self, name: str, allow_truncate: bool = False) -> None:
        self.name = name
        self._tokens: list[int] = []
        self._length = 0
        self._allow_truncate = allow_truncate
        self._writer_ident: int | None = None

    def __len__(self) -> int:
        return self._length

    def append(self, token: int) -> None:
        self._check_writer()
        self._tokens.append(token)
        self._length += 1

    def truncate_to(self, count: int) -> None:
        if not self._allow_truncate:
            raise ProtocolViolationError(f"buffer {self.name} is append-only")
        self._check_writer()
        if not 0 <= count <= self._length:
            raise InvalidInputError(
                f"cannot truncate {self.name} of length {self._length} to {count}"
            )
        # Shrink the published length first so readers never see a counter
        # covering positions that are about to disappear.
        self._length = count
        del self._tokens[count:]

    def token_at(self, index: int) -> int:
        if not 0 <= index < self._length:
            raise InvalidInputError(f"index {index} outside published range of {self.name}")
        return self._tokens[index]

    def read_range(self, start: int, stop: int) -> list[int]:
        """Copy of tokens at indices ``[start, stop)``; bounds must be published."""
        if not 0 <= start <= stop <= self._length:
            raise InvalidInputError(
                f"range [{start}, {stop}) outside published range of {self.name}"
            )
        return self._tokens[start:stop]

    def snapshot(self) -> list[int]:
        return self._tokens[: self._length]

    def _check_writer(self) -> None:
        ident = threading.get_ident()
        if self._writer_ident is None:
            self._writer_ident = ident
        elif self._writer_ident != ident:
            raise ProtocolViolationError(
                f"buffer {self.name} mutated by a second writer thread"
            )


@dataclass(frozen=True)
class RollbackRequest:
    """Verify-to-draft correction notice.

    ``target`` is the absolute position of the correction token, which the
    verify loop has already appended to ``V`` before raising the request.
    """

    target: int
    correction_token: int


class SharedDecodeState:
    """The coordination record shared by the draft and verify loops."""

    def __init__(
        self,
        prompt_length: int,
        max_new_tokens: int,
        max_draft_lead: int | None = None,
    ) -> None:
        if prompt_length < 1:
            raise InvalidInputError(f"prompt_length must be >= 1, got {prompt_length}")
        if max_new_tokens < 1:
            raise InvalidInputError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
        if max_draft_lead is not None and max_draft_lead < 1:
            raise InvalidInputError(
                f"max_draft_lead must be >= 1 when set, got {max_draft_lead}"
            )
        self.prompt_length = prompt_length
        self.max_new_tokens = max_new_tokens
        self.max_draft_lead = max_draft_lead
        self.D = TokenBuffer("D", allow_truncate=True)
        self.V = TokenBuffer("V", allow_truncate=False)
        self._p_d = prompt_length
        self._p_v = prompt_length
        self._rollback: RollbackRequest | None = None
        self._complete = False
        self.rollback_acks = 0

    # ------------------------------------------------------------------ #
    # Observation
    # ------------------------------------------------------------------ #

    @property
    def p_d(self) -> int:
        return self._p_d

    @property
    def p_v(self) -> int:
        return self._p_v

    @property
    def verified_count(self) -> int:
        return self._p_v - self.prompt_length

    @property
    def draft_lead(self) -> int:
        return self._p_d - self._p_v

    @property
    def lead_capped(self) -> bool:
        return self.max_draft_lead is not None and self.draft_lead >= self.max_draft_lead

    @property
    def pending_rollback(self) -> RollbackRequest | None:
        return self._rollback

    def rollback_pending(self) -> bool:
        return self._rollback is not None

    def is_complete(self) -> bool:
        return self._complete

    def verified_tokens(self) -> list[int]:
        return self.V.snapshot()

    # ------------------------------------------------------------------ #
    # Draft-loop operations
    # ------------------------------------------------------------------ #

    def publish_draft_token(self, token: int) -> None:
        """Append one token to ``D`` and advance ``p_d`` (in that order)."""
        self.D.append(token)
        self._p_d += 1

    def acknowledge_rollback(self, draft_model: MockModel, draft_state: ModelState) -> None:
        """Complete the handshake: resynchronize the draft side with ``V``.

        Rolls the draft state back to ``target - 1`` (the longest prefix it
        shares with ``V``), advances it with the correction token so the
        corrected history enters the draft context, mirrors ``D`` to ``V``
        up to ``target``, sets ``p_d = target``, and clears the request.
        """
        request = self._rollback
        if request is None:
            raise ProtocolViolationError("acknowledge_rollback with no pending request")
        target = request.target
        if not self.prompt_length < target <= self._p_d:
            raise ProtocolViolationError(
                f"rollback target {target} outside (prompt={self.prompt_length}, p_d={self._p_d}]"
            )
        draft_model.rollback(draft_state, target - 1)
        draft_model.advance(draft_state, [request.correction_token])
        self.D.truncate_to(target - 1 - self.prompt_length)
        self.D.append(request.correction_token)
        self._p_d = target
        self._rollback = None
        self.rollback_acks += 1
        self._check_resynchronized()

    # ------------------------------------------------------------------ #
    # Verify-loop operations
    # ------------------------------------------------------------------ #

    def read_draft_window(self) -> list[int]:
        """Tokens at absolute positions ``(p_v, p_d]`` as of one read of ``p_d``.

        Empty means "nothing to verify yet". Must not be called while a
        rollback is pending.
        """
        if self._rollback is not None:
            raise ProtocolViolationError("read_draft_window during pending rollback")
        observed_p_d = self._p_d
        return self.D.read_range(
            self._p_v - self.prompt_length, observed_p_d - self.prompt_length
        )

    def publish_verified(self, tokens: list[int]) -> None:
        """Append ``tokens`` to ``V`` then advance ``p_v`` by their count."""
        if self._rollback is not None:
            raise ProtocolViolationError("publish_verified during pending rollback")
        if len(tokens) == 0:
            raise InvalidInputError("publish_verified requires at least one token")
        for token in tokens:
            self.V.append(token)
        self._p_v += len(tokens)

    def request_rollback(self, request: RollbackRequest) -> None:
        """Raise the rollback flag; exactly-once until acknowledged."""
        if self._rollback is not None:
            raise ProtocolViolationError("rollback requested while one is already pending")
        if request.target != self._p_v:
            raise ProtocolViolationError(
                f"rollback target {request.target} does not match p_v {self._p_v}"
            )
        if (
            len(self.V) == 0
            or self.V.token_at(len(self.V) - 1) != request.correction_token
        ):
            raise ProtocolViolationError(
                "correction token must be published to V before requesting rollback"
            )
        self._rollback = request

    def signal_completion(self) -> None:
        if self._complete:
            raise ProtocolViolationError("completion signaled twice")
        self._complete = True

    # ------------------------------------------------------------------ #
    # Self-checks
    # ------------------------------------------------------------------ #

    def _check_resynchronized(self) -> None:
        # Post-ack invariant: D mirrors V through the verified frontier and
        # the two frontiers coincide.
        if self._p_d != self._p_v:
            raise ProtocolViolationError(
                f"post-ack frontiers disagree: p_d={self._p_d}, p_v={self._p_v}"
            )
        count = self._p_d - self.prompt_length
        if self.D.read_range(0, count) != self.V.read_range(0, count):
            raise ProtocolViolationError("post-ack D/V prefix mismatch")
