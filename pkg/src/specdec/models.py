"""Deterministic mock language models with incremental, rollback-able state.

These models stand in for real draft/verify LLM pairs. Each is a pure
function from a token prefix to the next greedy token, wrapped around an
incremental per-position cache so that engines exercise realistic
advance/rollback state management. Three families are provided:

* :class:`HashChainModel` -- next token derived from a documented 64-bit
  hash chain over (seed, prefix); the workhorse for randomized testing.
* :class:`ScriptedModel` -- next token read from a fixed position-indexed
  table, for forcing exact sequences and termination points.
* :func:`make_agreement_pair` -- a (draft, verify) model pair whose
  per-position agreement probability is a configurable constant ``rho``.

Hash chain contract (stable; re-implementable without this module):

    h_0 = splitmix64(seed)
    h_i = splitmix64(h_{i-1} XOR token_i)          for i = 1..n
    next_token(prefix of length n) = h_n mod vocab_size

where ``splitmix64`` is the standard finalizer (all arithmetic mod 2**64):

    x  = x + 0x9E3779B97F4A7C15
    z  = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

With ``exclude_eos=True`` the draw is over ``vocab_size - 1`` values and
remapped to skip ``eos_token``, so eos can never fire by chance; use this
in tests that need exact run lengths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import InvalidInputError, InvalidRollbackError

_MASK64 = (1 << 64) - 1

# Salts separating the agreement coin and the disagreement-token draw from
# the main prediction stream. Part of the documented contract.
AGREE_SALT = 0xD1B54A32D192ED03
DISAGREE_SALT = 0x8CB92BA72F3D8DD7


def splitmix64(x: int) -> int:
    """One splitmix64 step: increment by the golden gamma, then finalize."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class ModelState:
    """A model's incremental decoding state (KV-cache analog).

    ``tokens`` is the full incorporated prefix including the prompt;
    ``cache`` is model-specific per-position state that is cropped on
    rollback, exactly like a transformer KV cache.
    """

    prompt_length: int
    tokens: list[int]
    cache: list[int] | None
    owner: "MockModel" = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    @property
    def prefix_length(self) -> int:
        return len(self.tokens)

    def clone(self) -> "ModelState":
        return ModelState(
            prompt_length=self.prompt_length,
            tokens=list(self.tokens),
            cache=list(self.cache) if self.cache is not None else None,
            owner=self.owner,
        )


class MockModel:
    """Base class: deterministic greedy next-token prediction over a prefix.

    Subclasses implement ``_predict`` (pure function of the state) and the
    cache maintenance hooks. All mutation goes through ``advance`` and
    ``rollback`` so the soundness property holds: any interleaving of
    advance/rollback is prediction-equivalent to a fresh state advanced
    with the net prefix.
    """

    def __init__(self, vocab_size: int, eos_token: int) -> None:
        if vocab_size < 2:
            raise InvalidInputError(f"vocab_size must be >= 2, got {vocab_size}")
        if not 0 <= eos_token < vocab_size:
            raise InvalidInputError(
                f"eos_token must be in [0, {vocab_size}), got {eos_token}"
            )
        self.vocab_size = vocab_size
        self.eos_token = eos_token

    # ------------------------------------------------------------------ #
    # Prefix lifecycle
    # ------------------------------------------------------------------ #

    def init_state(self, prompt: Sequence[int]) -> ModelState:
        """Create a fresh state conditioned on ``prompt`` (must be non-empty)."""
        if len(prompt) == 0:
            raise InvalidInputError("prompt must be non-empty")
        self._validate_tokens(prompt)
        state = ModelState(
            prompt_length=len(prompt), tokens=[], cache=self._initial_cache(), owner=self
        )
        self._extend(state, prompt)
        return state

    def next_token(self, state: ModelState) -> int:
        """Greedy prediction for position ``prefix_length + 1``. Pure; no mutation."""
        self._check_owner(state)
        return self._predict(state)

    def advance(self, state: ModelState, tokens: Sequence[int]) -> None:
        """Incorporate ``tokens`` into the state, extending the prefix."""
        self._check_owner(state)
        if len(tokens) == 0:
            raise InvalidInputError("advance requires at least one token")
        self._validate_tokens(tokens)
        self._extend(state, tokens)

    def rollback(self, state: ModelState, position: int) -> None:
        """Crop the state back to ``position`` incorporated tokens.

        ``position`` counts absolute tokens (prompt included) and must lie in
        ``[prompt_length, prefix_length]``.
        """
        self._check_owner(state)
        if position > state.prefix_length:
            raise InvalidRollbackError(
                f"rollback position {position} exceeds prefix length {state.prefix_length}"
            )
        if position < state.prompt_length:
            raise InvalidRollbackError(
                f"rollback position {position} is below prompt length {state.prompt_length}"
            )
        del state.tokens[position:]
        self._crop_cache(state, position)

    def verify_tokens(self, state: ModelState, candidates: Sequence[int]) -> list[int]:
        """Greedy predictions for each candidate position, teacher-forced.

        Returns ``preds`` with ``preds[j]`` the model's prediction at absolute
        position ``prefix_length + 1 + j`` given the prefix plus
        ``candidates[:j]``. Does not mutate ``state``; equivalent to
        ``len(candidates)`` sequential next_token/advance calls on a scratch
        copy (which is exactly what this default implementation does).
        """
        self._check_owner(state)
        if len(candidates) == 0:
            raise InvalidInputError("verify_tokens requires at least one candidate")
        self._validate_tokens(candidates)
        scratch = state.clone()
        preds: list[int] = []
        for tok in candidates:
            preds.append(self._predict(scratch))
            self._extend(scratch, [tok])
        return preds

    # ------------------------------------------------------------------ #
    # Subclass hooks
    # ------------------------------------------------------------------ #

    def _predict(self, state: ModelState) -> int:
        raise NotImplementedError

    def _initial_cache(self) -> list[int] | None:
        return None

    def _extend(self, state: ModelState, tokens: Sequence[int]) -> None:
        state.tokens.extend(tokens)

    def _crop_cache(self, state: ModelState, position: int) -> None:
        pass

    # ------------------------------------------------------------------ #
    # Validation
    # ------------------------------------------------------------------ #

    def _validate_tokens(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            if not isinstance(tok, int) or not 0 <= tok < self.vocab_size:
                raise InvalidInputError(
                    f"token {tok!r} out of vocabulary range [0, {self.vocab_size})"
                )

    def _check_owner(self, state: ModelState) -> None:
        if state.owner is not self:
            raise InvalidInputError("state belongs to a different model")


class _ChainModel(MockModel):
    """Shared machinery for models driven by the splitmix64 hash chain.

    The cache stores the running chain value after every incorporated token
    (``cache[i]`` = h_i, so ``len(cache) == prefix_length + 1``); rollback is
    a crop of that list, and prediction is O(1) in the prefix length.
    """

    def __init__(self, seed: int, vocab_size: int, eos_token: int, exclude_eos: bool = False) -> None:
        super().__init__(vocab_size, eos_token)
        if exclude_eos and vocab_size < 3:
            raise InvalidInputError("exclude_eos requires vocab_size >= 3")
        self.seed = seed & _MASK64
        self.exclude_eos = exclude_eos

    def _initial_cache(self) -> list[int]:
        return [splitmix64(self.seed)]

    def _extend(self, state: ModelState, tokens: Sequence[int]) -> None:
        assert state.cache is not None
        h = state.cache[-1]
        for tok in tokens:
            h = splitmix64(h ^ tok)
            state.cache.append(h)
        state.tokens.extend(tokens)

    def _crop_cache(self, state: ModelState, position: int) -> None:
        assert state.cache is not None
        del state.cache[position + 1 :]

    def _predict(self, state: ModelState) -> int:
        assert state.cache is not None
        return self._token_from_hash(state.cache[-1])

    def verify_tokens(self, state: ModelState, candidates: Sequence[int]) -> list[int]:
        # Direct chain walk; no scratch-state clone. The sequential
        # next_token/advance evaluation remains the reference oracle.
        self._check_owner(state)
        if len(candidates) == 0:
            raise InvalidInputError("verify_tokens requires at least one candidate")
        self._validate_tokens(candidates)
        assert state.cache is not None
        h = state.cache[-1]
        preds: list[int] = []
        for tok in candidates:
            preds.append(self._token_from_hash(h))
            h = splitmix64(h ^ tok)
        return preds

    # hook: map a chain value to this model's token prediction
    def _token_from_hash(self, h: int) -> int:
        raise NotImplementedError

    def _base_prediction(self, h: int) -> int:
        """The underlying hash-chain token draw (eos-excluding if configured)."""
        if self.exclude_eos:
            raw = h % (self.vocab_size - 1)
            return raw + 1 if raw >= self.eos_token else raw
        return h % self.vocab_size


class HashChainModel(_ChainModel):
    """Greedy model whose next token is ``h_n mod vocab_size`` (see module docs)."""

    def _token_from_hash(self, h: int) -> int:
        return self._base_prediction(h)


class AgreementDraftModel(_ChainModel):
    """Draft-side member of an agreement pair.

    Runs the same hash chain as its verify counterpart. At each prefix it
    predicts the verify model's token when the prefix-keyed coin
    ``splitmix64(h ^ AGREE_SALT) < rho * 2**64`` lands, and otherwise a
    deterministically chosen *different* token drawn uniformly from the
    remaining vocabulary via ``splitmix64(h ^ DISAGREE_SALT)``.
    """

    def __init__(
        self,
        seed: int,
        agreement_rho: float,
        vocab_size: int,
        eos_token: int,
        exclude_eos: bool = False,
    ) -> None:
        super().__init__(seed, vocab_size, eos_token, exclude_eos)
        if not 0.0 <= agreement_rho <= 1.0:
            raise InvalidInputError(f"agreement_rho must be in [0, 1], got {agreement_rho}")
        choosable = vocab_size - (1 if exclude_eos else 0)
        if agreement_rho < 1.0 and choosable < 2:
            raise InvalidInputError(
                "vocabulary too small to hold a disagreeing token alternative"
            )
        self.agreement_rho = agreement_rho
        self._rho_threshold = int(agreement_rho * 2.0**64)

    def _token_from_hash(self, h: int) -> int:
        agreed = self._base_prediction(h)
        if splitmix64(h ^ AGREE_SALT) < self._rho_threshold:
            return agreed
        return self._different_token(h, agreed)

    def _different_token(self, h: int, agreed: int) -> int:
        excluded = {agreed}
        if self.exclude_eos:
            excluded.add(self.eos_token)
        draw = splitmix64(h ^ DISAGREE_SALT) % (self.vocab_size - len(excluded))
        for value in sorted(excluded):
            if draw >= value:
                draw += 1
        return draw


class ScriptedModel(MockModel):
    """Model whose prediction depends only on the absolute position.

    ``script[i]`` is the token emitted at absolute position ``i + 1``
    (1-based, prompt positions included); positions past the end of the
    table cycle. ``eos_position``, when set, forces ``eos_token`` at that
    absolute position regardless of the table, pinning run lengths exactly.
    """

    def __init__(
        self,
        script: Sequence[int],
        vocab_size: int,
        eos_token: int,
        eos_position: int | None = None,
    ) -> None:
        super().__init__(vocab_size, eos_token)
        if len(script) == 0:
            raise InvalidInputError("script must contain at least one token")
        self._validate_tokens(script)
        if eos_position is not None and eos_position < 1:
            raise InvalidInputError(f"eos_position must be >= 1, got {eos_position}")
        self.script = list(script)
        self.eos_position = eos_position

    def _predict(self, state: ModelState) -> int:
        position = state.prefix_length + 1
        if self.eos_position is not None and position == self.eos_position:
            return self.eos_token
        return self.script[(position - 1) % len(self.script)]


def make_agreement_pair(
    seed: int,
    rho: float,
    vocab_size: int,
    eos_token: int,
    exclude_eos: bool = False,
) -> tuple[AgreementDraftModel, HashChainModel]:
    """Build a (draft, verify) pair with per-position agreement probability ``rho``.

    The verify model is a plain hash chain; the draft member shares its chain
    and agrees with it at each prefix independently with probability ``rho``.
    """
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError(f"rho must be in [0, 1], got {rho}")
    verify = HashChainModel(seed, vocab_size, eos_token, exclude_eos)
    draft = AgreementDraftModel(seed, rho, vocab_size, eos_token, exclude_eos)
    return draft, verify


def load_script(path: str | Path) -> list[int]:
    """Load a scripted token table from a JSON list or whitespace-separated text."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = text.split()
    try:
        tokens = [int(v) for v in data]
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"script file {path} is not a list of integers") from exc
    if not tokens:
        raise InvalidInputError(f"script file {path} is empty")
    return tokens
