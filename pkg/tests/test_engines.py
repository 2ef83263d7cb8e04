"""Engine tests: the three strategies, their step functions, and output equivalence."""

from __future__ import annotations

import random

import pytest

from specdec import (
    DecodeConfig,
    DraftStepOutcome,
    HashChainModel,
    InvalidInputError,
    ScriptedModel,
    SharedDecodeState,
    SimulatedExecutor,
    ThreadExecutor,
    VerifyStepKind,
    decode_autoregressive,
    decode_speculative_async,
    decode_speculative_sync,
    draft_loop_step,
    find_mismatch,
    finalize_tokens,
    make_agreement_pair,
    verify_loop_step,
)
from tests.test_models import chain_oracle

PROMPT = [1, 2, 3]


class TestFindMismatch:
    def test_no_mismatch(self):
        assert find_mismatch([5, 7, 9], [5, 7, 9]) is None

    def test_mismatch_index_is_one_based(self):
        assert find_mismatch([5, 7, 9], [5, 8, 2]) == 2

    def test_first_position(self):
        assert find_mismatch([4], [6]) == 1

    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            find_mismatch([1, 2], [1])


class TestFinalize:
    def test_eos_truncates_batch_tail(self):
        assert finalize_tokens([5, 9, 6, 7], eos_token=9, max_new_tokens=10) == ([5, 9], "eos")

    def test_length_limit(self):
        assert finalize_tokens([1, 2, 3, 4], eos_token=9, max_new_tokens=3) == (
            [1, 2, 3],
            "length_limit",
        )

    def test_eos_past_limit_ignored(self):
        assert finalize_tokens([1, 2, 3, 9], eos_token=9, max_new_tokens=3) == (
            [1, 2, 3],
            "length_limit",
        )


class TestAutoregressive:
    def test_eos_at_first_generated_position(self):
        model = ScriptedModel([5], vocab_size=100, eos_token=99, eos_position=4)
        result = decode_autoregressive(model, PROMPT, DecodeConfig(max_new_tokens=10))
        assert result.tokens == [99]
        assert result.finished_by == "eos"

    def test_length_limit_without_eos(self):
        model = ScriptedModel([5, 6], vocab_size=100, eos_token=99)
        result = decode_autoregressive(model, PROMPT, DecodeConfig(max_new_tokens=5))
        assert len(result.tokens) == 5
        assert result.finished_by == "length_limit"

    def test_matches_hash_oracle_sequence(self):
        # Frozen 8-step oracle walk for seed=42, prompt [1,2,3], vocab=101.
        model = HashChainModel(seed=42, vocab_size=101, eos_token=100)
        result = decode_autoregressive(model, PROMPT, DecodeConfig(max_new_tokens=8))
        assert result.tokens == [93, 79, 8, 54, 90, 96, 74, 3]
        prefix = list(PROMPT)
        for tok in result.tokens:
            assert tok == chain_oracle(42, prefix, 101)
            prefix.append(tok)


class TestSyncSpeculative:
    def test_full_agreement_round_arithmetic(self):
        # rho=1, k=4, N=10: two rounds of 4 matched + 1 bonus.
        draft, verify = make_agreement_pair(
            seed=3, rho=1.0, vocab_size=1000, eos_token=0, exclude_eos=True
        )
        config = DecodeConfig(max_new_tokens=10, draft_window_k=4)
        result = decode_speculative_sync(draft, verify, PROMPT, config)
        assert len(result.tokens) == 10
        assert result.stats.verify_steps == 2
        assert result.stats.accepted_per_verify_step == 5.0
        assert result.stats.rollbacks == 0

    def test_zero_agreement_one_token_per_round(self):
        draft, verify = make_agreement_pair(
            seed=3, rho=0.0, vocab_size=1000, eos_token=0, exclude_eos=True
        )
        config = DecodeConfig(max_new_tokens=6, draft_window_k=4)
        result = decode_speculative_sync(draft, verify, PROMPT, config)
        assert len(result.tokens) == 6
        assert result.stats.verify_steps == 6
        assert result.stats.accepted_per_verify_step == 1.0
        assert result.stats.rollbacks == 6

    def test_equals_autoregressive_across_seeds(self):
        for seed in range(200):
            draft, verify = make_agreement_pair(
                seed=seed, rho=0.8, vocab_size=503, eos_token=0
            )
            config = DecodeConfig(max_new_tokens=64, draft_window_k=4)
            oracle = decode_autoregressive(verify, PROMPT, config)
            sync = decode_speculative_sync(draft, verify, PROMPT, config)
            assert sync.tokens == oracle.tokens
            assert sync.finished_by == oracle.finished_by


class TestAsyncSteps:
    def _setup(self, rho=0.0, prompt=PROMPT, max_new_tokens=50, max_draft_lead=None):
        draft, verify = make_agreement_pair(
            seed=21, rho=rho, vocab_size=701, eos_token=0, exclude_eos=True
        )
        shared = SharedDecodeState(len(prompt), max_new_tokens, max_draft_lead)
        return shared, draft, draft.init_state(prompt), verify, verify.init_state(prompt)

    def test_normal_step_publishes_one_token(self):
        shared, draft, ds, _, _ = self._setup()
        assert draft_loop_step(shared, draft, ds) is DraftStepOutcome.GENERATED
        assert shared.p_d == len(PROMPT) + 1
        assert ds.prefix_length == len(PROMPT) + 1

    def test_completion_beats_everything(self):
        shared, draft, ds, _, _ = self._setup()
        shared.signal_completion()
        assert draft_loop_step(shared, draft, ds) is DraftStepOutcome.STOPPED
        assert ds.prefix_length == len(PROMPT)

    def test_rollback_acknowledged_before_generation(self):
        shared, draft, ds, verify, vs = self._setup(rho=0.0)
        draft_loop_step(shared, draft, ds)
        result = verify_loop_step(shared, verify, vs)
        assert result.kind is VerifyStepKind.CORRECTED
        outcome = draft_loop_step(shared, draft, ds)
        assert outcome is DraftStepOutcome.ROLLED_BACK
        assert shared.p_d == shared.p_v

    def test_lead_cap_idles(self):
        shared, draft, ds, _, _ = self._setup(max_draft_lead=2)
        assert draft_loop_step(shared, draft, ds) is DraftStepOutcome.GENERATED
        assert draft_loop_step(shared, draft, ds) is DraftStepOutcome.GENERATED
        assert draft_loop_step(shared, draft, ds) is DraftStepOutcome.IDLE
        assert shared.p_d == len(PROMPT) + 2

    def test_verify_idle_on_empty_window(self):
        shared, _, _, verify, vs = self._setup()
        assert verify_loop_step(shared, verify, vs).kind is VerifyStepKind.IDLE

    def test_verify_full_match_accepts_window(self):
        shared, draft, ds, verify, vs = self._setup(rho=1.0)
        for _ in range(3):
            draft_loop_step(shared, draft, ds)
        result = verify_loop_step(shared, verify, vs)
        assert result.kind is VerifyStepKind.ACCEPTED
        assert result.published == 3
        assert result.matched == 3
        assert shared.p_v == len(PROMPT) + 3

    def test_verify_mismatch_publishes_matched_plus_correction(self):
        # Window [a, x, c] where the verify model disagrees at position 2.
        shared = SharedDecodeState(2, 50)
        verify = HashChainModel(seed=77, vocab_size=997, eos_token=0)
        vs = verify.init_state([1, 2])
        a = verify.next_token(vs)
        scratch = verify.init_state([1, 2])
        verify.advance(scratch, [a])
        b = verify.next_token(scratch)
        x = (b + 1) % 997
        for tok in (a, x, 5):
            shared.publish_draft_token(tok)
        result = verify_loop_step(shared, verify, vs)
        assert result.kind is VerifyStepKind.CORRECTED
        assert result.published == 2  # a then the correction b
        assert result.matched == 1
        assert shared.verified_tokens() == [a, b]
        assert shared.rollback_pending()
        assert shared.pending_rollback.target == 4

    def test_verify_done_on_limit_even_with_draft_ahead(self):
        shared, draft, ds, verify, vs = self._setup(rho=1.0, max_new_tokens=2)
        for _ in range(4):
            draft_loop_step(shared, draft, ds)
        result = verify_loop_step(shared, verify, vs)
        assert result.kind is VerifyStepKind.DONE
        assert shared.is_complete()
        assert shared.p_d > shared.p_v or shared.p_d == shared.p_v

    def test_livelock_freedom_rho_zero(self):
        # With full disagreement every cycle still advances p_v by one,
        # because the correction enters the draft context at the ack.
        shared, draft, ds, verify, vs = self._setup(rho=0.0, max_new_tokens=100)
        seen_p_v = shared.p_v
        steps = 0
        while not shared.is_complete():
            if draft_loop_step(shared, draft, ds) is DraftStepOutcome.GENERATED:
                result = verify_loop_step(shared, verify, vs)
                assert result.kind in (VerifyStepKind.CORRECTED, VerifyStepKind.DONE)
                assert shared.p_v == seen_p_v + 1
                seen_p_v = shared.p_v
                steps += 1
        assert steps == 100


class TestAsyncEngine:
    def test_rho_one_no_rollbacks(self):
        draft, verify = make_agreement_pair(
            seed=9, rho=1.0, vocab_size=997, eos_token=0, exclude_eos=True
        )
        config = DecodeConfig(max_new_tokens=40)
        oracle = decode_autoregressive(verify, PROMPT, config)
        result = decode_speculative_async(draft, verify, PROMPT, config)
        assert result.tokens == oracle.tokens
        assert result.stats.rollbacks == 0
        assert result.stats.wasted_draft_tokens == 0

    def test_rho_zero_equals_oracle(self):
        draft, verify = make_agreement_pair(
            seed=9, rho=0.0, vocab_size=997, eos_token=0, exclude_eos=True
        )
        config = DecodeConfig(max_new_tokens=40)
        oracle = decode_autoregressive(verify, PROMPT, config)
        result = decode_speculative_async(draft, verify, PROMPT, config)
        assert result.tokens == oracle.tokens
        assert result.stats.rollbacks == 40

    def test_equivalence_thread_executor_across_seeds(self):
        for seed in range(40):
            draft, verify = make_agreement_pair(seed=seed, rho=0.7, vocab_size=503, eos_token=0)
            config = DecodeConfig(max_new_tokens=48, seed=seed)
            oracle = decode_autoregressive(verify, PROMPT, config)
            result = decode_speculative_async(draft, verify, PROMPT, config)
            assert result.tokens == oracle.tokens
            assert result.finished_by == oracle.finished_by

    def test_poll_backoff_does_not_affect_output(self):
        draft, verify = make_agreement_pair(seed=123, rho=0.6, vocab_size=503, eos_token=0)
        config = DecodeConfig(max_new_tokens=32)
        outputs = set()
        for jitter, jseed in [(0.0, 0), (0.05, 1), (0.2, 2), (0.05, 3)]:
            executor = ThreadExecutor(poll_jitter_ms=jitter, jitter_seed=jseed)
            result = decode_speculative_async(draft, verify, PROMPT, config, executor=executor)
            outputs.add(tuple(result.tokens))
        assert len(outputs) == 1

    def test_max_draft_lead_does_not_affect_output(self):
        draft, verify = make_agreement_pair(seed=55, rho=0.8, vocab_size=503, eos_token=0)
        baseline = None
        for lead in (None, 1, 2, 8):
            config = DecodeConfig(max_new_tokens=40, max_draft_lead=lead)
            result = decode_speculative_async(
                draft, verify, PROMPT, config, executor=SimulatedExecutor()
            )
            if baseline is None:
                baseline = result.tokens
            assert result.tokens == baseline

    def test_eos_termination_matches_oracle(self):
        # Scripted verify model forces eos at generated position 7.
        verify = ScriptedModel([5], vocab_size=100, eos_token=99, eos_position=len(PROMPT) + 7)
        draft = ScriptedModel([5], vocab_size=100, eos_token=99)
        config = DecodeConfig(max_new_tokens=50)
        oracle = decode_autoregressive(verify, PROMPT, config)
        result = decode_speculative_async(draft, verify, PROMPT, config)
        assert result.tokens == oracle.tokens
        assert result.finished_by == "eos"
        assert result.tokens[-1] == 99

    def test_n_equals_one(self):
        draft, verify = make_agreement_pair(seed=2, rho=0.0, vocab_size=100, eos_token=0)
        config = DecodeConfig(max_new_tokens=1)
        oracle = decode_autoregressive(verify, PROMPT, config)
        result = decode_speculative_async(draft, verify, PROMPT, config)
        assert result.tokens == oracle.tokens
        assert len(result.tokens) == 1


class TestRollbackCountTheorem:
    def test_rollbacks_equal_disagreements_along_verified_path(self):
        # Independent oracle: walk the canonical greedy path for as many
        # positions as were verified (the final batch may overshoot the
        # result by a truncated correction) and count positions where the
        # draft's prediction, given the canonical prefix, differs from the
        # verify model's.
        for seed in range(30):
            draft, verify = make_agreement_pair(
                seed=seed, rho=0.6, vocab_size=997, eos_token=0, exclude_eos=True
            )
            config = DecodeConfig(max_new_tokens=40)
            result = decode_speculative_async(
                draft, verify, PROMPT, config, executor=SimulatedExecutor()
            )
            verified_count = max(
                e.pos_hi for e in result.trace.events if e.kind.startswith("verify_")
            ) - len(PROMPT)
            assert verified_count >= len(result.tokens)
            disagreements = 0
            prefix = list(PROMPT)
            for position in range(verified_count):
                verify_pred = verify.next_token(verify.init_state(prefix))
                draft_pred = draft.next_token(draft.init_state(prefix))
                if position < len(result.tokens):
                    assert result.tokens[position] == verify_pred
                disagreements += draft_pred != verify_pred
                prefix.append(verify_pred)
            assert result.stats.rollbacks == disagreements

    def test_threaded_rollback_count_matches_simulated(self):
        draft, verify = make_agreement_pair(
            seed=321, rho=0.5, vocab_size=997, eos_token=0, exclude_eos=True
        )
        config = DecodeConfig(max_new_tokens=30)
        threaded = decode_speculative_async(draft, verify, PROMPT, config)
        simulated = decode_speculative_async(
            draft, verify, PROMPT, config, executor=SimulatedExecutor()
        )
        assert threaded.stats.rollbacks == simulated.stats.rollbacks


class TestSleepInjection:
    def test_injected_sleeps_do_not_change_output(self):
        from specdec import LatencyModel

        draft, verify = make_agreement_pair(seed=8, rho=0.8, vocab_size=503, eos_token=0)
        config = DecodeConfig(max_new_tokens=8)
        plain = decode_speculative_async(draft, verify, PROMPT, config)
        injected = decode_speculative_async(
            draft, verify, PROMPT, config,
            executor=ThreadExecutor(
                sleep_latency=LatencyModel(draft_per_token_ms=0.2, verify_base_ms=0.5)
            ),
        )
        assert injected.tokens == plain.tokens
        assert injected.stats.total_ms > 0.0


class TestEngineEquivalenceCampaign:
    def test_randomized_triple_equivalence(self):
        # Broader sweep lives in the acceptance suite; this is the smoke tier.
        rng = random.Random(99)
        for _ in range(60):
            rho = rng.choice([0.0, 0.3, 0.7, 1.0])
            n = rng.choice([1, 2, 17, 40])
            k = rng.choice([1, 4, 8])
            seed = rng.getrandbits(32)
            prompt = [rng.randrange(400) for _ in range(rng.randint(1, 5))]
            draft, verify = make_agreement_pair(seed=seed, rho=rho, vocab_size=401, eos_token=0)
            config = DecodeConfig(max_new_tokens=n, draft_window_k=k, seed=seed)
            oracle = decode_autoregressive(verify, prompt, config)
            sync = decode_speculative_sync(draft, verify, prompt, config)
            asynchronous = decode_speculative_async(
                draft, verify, prompt, config, executor=SimulatedExecutor()
            )
            assert sync.tokens == oracle.tokens
            assert asynchronous.tokens == oracle.tokens
            assert sync.finished_by == oracle.finished_by == asynchronous.finished_by
