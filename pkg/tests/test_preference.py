import dataclasses
import itertools
import json

import numpy as np
import pytest

from ylab.acceptance import PATTERN_VARIANTS, dpo_gradcheck, random_pairs
from ylab.attention import LayerPattern
from ylab.exceptions import InvalidArgumentError, NumericError
from ylab.kvcache import ToyTransformer
from ylab.numkit import make_rng, spawn_seed
from ylab.preference import (
    DEFAULT_TEMPERATURES,
    Branch,
    DpoConfig,
    LogProbCache,
    PreferencePair,
    _response_logprob,
    batch_dpo_loss,
    bt_loss,
    build_logp_cache,
    dpo_loss,
    generate,
    online_dpo,
    read_pairs,
    sample_and_pair,
    score_batch_shared_prefix,
    score_pair_shared_prefix,
    sequence_logprob,
    train_dpo,
    train_reward_head,
)

LN2 = float(np.log(2.0))


def toy(pattern="3:1", share=True, seed=0, n_layers=4):
    return ToyTransformer.random(
        seed, LayerPattern.parse(pattern, window=4, share_full_kv=share), n_layers=n_layers
    )


def token_mean_reward(prompt, response):
    return float(np.mean(response))


class TestPreferencePair:
    def test_converts_to_int_tuples(self):
        pair = PreferencePair(np.array([1, 2]), [3], [4, 5])
        assert pair.prompt == (1, 2)
        assert pair.response(Branch.REJECTED) == (4, 5)

    def test_empty_prompt_allowed(self):
        assert PreferencePair([], [1], [2]).prompt == ()

    def test_identical_responses(self):
        with pytest.raises(InvalidArgumentError):
            PreferencePair([1], [2, 3], [2, 3])

    def test_empty_response(self):
        with pytest.raises(InvalidArgumentError):
            PreferencePair([1], [], [2])

    def test_beta_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            DpoConfig(beta=0.0)


class TestBtLoss:
    def test_zero_difference(self):
        result = bt_loss(1.5, 1.5)
        assert result.loss == pytest.approx(LN2)
        assert result.grad_chosen == pytest.approx(-0.5)
        assert result.grad_rejected == pytest.approx(0.5)

    def test_large_difference_is_stable(self):
        assert bt_loss(50.0, 0.0).loss < 1e-20
        assert bt_loss(0.0, 800.0).loss == pytest.approx(800.0)

    def test_closed_form(self):
        assert bt_loss(2.0, 0.0).loss == pytest.approx(0.126928011, abs=1e-9)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            bt_loss(np.inf, 0.0)


class TestDpoLoss:
    def test_policy_equal_to_reference(self):
        result = dpo_loss((-3.0, -7.0), (-3.0, -7.0))
        assert result.loss == pytest.approx(LN2)
        assert result.margin == 0.0

    def test_closed_form(self):
        result = dpo_loss((-1.0, -5.0), (0.0, 0.0), DpoConfig(beta=0.5))
        assert result.margin == 2.0
        assert result.loss == pytest.approx(0.126928011, abs=1e-9)

    def test_gradients_match_finite_differences(self):
        assert dpo_gradcheck(seed=3, instances=20) < 1e-6

    def test_shift_invariance(self):
        rng = make_rng(8)
        for _ in range(20):
            policy, reference = rng.normal(-5, 2, size=(2, 2))
            shift = rng.normal(0, 10, size=2)
            config = DpoConfig(beta=float(rng.uniform(0.05, 1.0)))
            base = dpo_loss(policy, reference, config).loss
            shifted = dpo_loss(policy + shift, reference + shift, config).loss
            assert shifted == pytest.approx(base, abs=1e-12)

    def test_antisymmetry(self):
        rng = make_rng(9)
        for _ in range(20):
            policy, reference = rng.normal(-5, 2, size=(2, 2))
            config = DpoConfig(beta=float(rng.uniform(0.05, 1.0)))
            forward = dpo_loss(policy, reference, config)
            swapped = dpo_loss(policy[::-1], reference[::-1], config)
            assert swapped.margin == pytest.approx(-forward.margin, abs=1e-12)
            m = forward.margin
            expected = -np.log(1 / (1 + np.exp(-m)) * 1 / (1 + np.exp(m)))
            assert forward.loss + swapped.loss == pytest.approx(expected, abs=1e-12)


class TestSequenceLogprob:
    def test_manual_sum(self):
        model = toy()
        prompt, response = [3, 1, 4], [1, 5, 9]
        logits = model.forward(prompt + response)
        expected = 0.0
        for position, token in zip(range(3, 6), response):
            row = logits[position - 1]
            expected += row[token] - np.log(np.exp(row).sum())
        assert sequence_logprob(model, prompt, response) == pytest.approx(expected, abs=1e-10)

    def test_empty_prompt_skips_first_token(self):
        model = toy()
        logits = model.forward([7, 2])
        row = logits[0]
        expected = row[2] - np.log(np.exp(row).sum())
        assert sequence_logprob(model, [], [7, 2]) == pytest.approx(expected, abs=1e-10)

    def test_bias_gradient(self):
        model = toy()
        prompt, response = [2, 7, 1], [8, 2, 8]
        _, grad = _response_logprob(model, prompt, response)
        numeric = np.empty(model.vocab_size)
        for token in range(model.vocab_size):
            bump = np.zeros(model.vocab_size)
            bump[token] = 1e-5
            upper = sequence_logprob(model.with_logit_bias(bump), prompt, response)
            lower = sequence_logprob(model.with_logit_bias(-bump), prompt, response)
            numeric[token] = (upper - lower) / 2e-5
        # unused tokens have near-zero gradients
        np.testing.assert_allclose(grad, numeric, rtol=0.0, atol=1e-8)
        assert grad.sum() == pytest.approx(0.0, abs=1e-12)

    def test_out_of_vocabulary(self):
        with pytest.raises(InvalidArgumentError):
            sequence_logprob(toy(), [1], [99])


class TestLogProbCache:
    def test_cached_equals_live(self):
        reference = toy(seed=1)
        pairs = random_pairs(make_rng(10), 10, reference.vocab_size)
        cache = build_logp_cache(reference, pairs)
        assert len(cache) == 20
        for pair_id, pair in enumerate(pairs):
            assert cache[(pair_id, Branch.CHOSEN)] == sequence_logprob(
                reference, pair.prompt, pair.chosen
            )
            assert cache.reference_logps(pair_id)[1] == sequence_logprob(
                reference, pair.prompt, pair.rejected
            )

    def test_read_only(self):
        cache = build_logp_cache(toy(), [PreferencePair([1], [2], [3])])
        with pytest.raises(TypeError):
            cache.entries[(5, Branch.CHOSEN)] = 0.0

    def test_missing_entry(self):
        cache = build_logp_cache(toy(), [PreferencePair([1], [2], [3])])
        with pytest.raises(InvalidArgumentError, match="pair 4"):
            cache.reference_logps(4)

    def test_non_finite_entries(self):
        with pytest.raises(NumericError):
            LogProbCache("s", {(0, Branch.CHOSEN): float("nan")})

    def test_training_with_cache_matches_live_reference(self):
        reference = toy(seed=1)
        policy = toy(seed=2)
        pairs = random_pairs(make_rng(11), 50, reference.vocab_size)
        cache = build_logp_cache(reference, pairs)
        config = DpoConfig(beta=0.1)
        cached = train_dpo(policy, pairs, config, steps=5, lr=0.5, reference=cache)
        live = train_dpo(policy, pairs, config, steps=5, lr=0.5, reference=reference)
        for a, b in zip(cached.trajectory, live.trajectory):
            assert a.loss == pytest.approx(b.loss, abs=1e-10)
            assert a.mean_margin == pytest.approx(b.mean_margin, abs=1e-10)


class TestTrainDpo:
    def test_loss_decreases_from_ln2(self):
        model = toy()
        pairs = random_pairs(make_rng(12), 8, model.vocab_size)
        run = train_dpo(model, pairs, DpoConfig(), steps=5, lr=0.5, reference=model)
        assert run.trajectory[0].loss == pytest.approx(LN2)
        assert run.trajectory[-1].loss < run.trajectory[0].loss
        assert run.trajectory[-1].mean_margin > 0.0

    def test_bad_arguments(self):
        model = toy()
        pairs = [PreferencePair([1], [2], [3])]
        with pytest.raises(InvalidArgumentError):
            train_dpo(model, [], DpoConfig(), steps=1, lr=0.1, reference=model)
        with pytest.raises(InvalidArgumentError):
            train_dpo(model, pairs, DpoConfig(), steps=0, lr=0.1, reference=model)


class TestSharedPrefix:
    @pytest.mark.parametrize("pattern, share", PATTERN_VARIANTS)
    @pytest.mark.parametrize("prompt_len", [0, 1, 7, 24])
    def test_matches_independent_forwards(self, pattern, share, prompt_len):
        model = toy(pattern, share, seed=4, n_layers=8)
        (pair,) = random_pairs(make_rng(prompt_len), 1, model.vocab_size, prompt_len=prompt_len)
        score = score_pair_shared_prefix(model, pair)
        assert score.recompute_savings == prompt_len
        assert score.chosen_logp == pytest.approx(
            sequence_logprob(model, pair.prompt, pair.chosen), abs=1e-9
        )
        assert score.rejected_logp == pytest.approx(
            sequence_logprob(model, pair.prompt, pair.rejected), abs=1e-9
        )

    def test_batch_order_matches_pairwise(self):
        model = toy()
        pairs = random_pairs(make_rng(13), 6, model.vocab_size)
        cache = build_logp_cache(toy(seed=1), pairs)
        batched = score_batch_shared_prefix(model, pairs)
        pairwise = [score_pair_shared_prefix(model, pair) for pair in pairs]
        assert batch_dpo_loss(batched, cache) == pytest.approx(
            batch_dpo_loss(pairwise, cache), abs=1e-10
        )


class TestSampleAndPair:
    def test_pairs_argmax_with_argmin(self):
        model = toy()
        prompt = (3, 1, 4)
        pair = sample_and_pair(model, token_mean_reward, prompt, n_candidates=16, seed=5)

        candidates = [
            generate(
                model,
                prompt,
                8,
                DEFAULT_TEMPERATURES[i % len(DEFAULT_TEMPERATURES)],
                make_rng(spawn_seed(5, i)),
            )
            for i in range(16)
        ]
        rewards = [token_mean_reward(prompt, c) for c in candidates]
        best = max(range(16), key=lambda i: (rewards[i], -i))
        worst = min(range(16), key=lambda i: (rewards[i], i))
        assert pair == PreferencePair(prompt, candidates[best], candidates[worst])

    def test_gap_too_large(self):
        pair = sample_and_pair(toy(), token_mean_reward, [1, 2], n_candidates=4, min_gap=1e6)
        assert pair is None

    def test_two_candidates(self):
        counter = itertools.count()
        rewards = {0: 1.0, 1: 0.0}

        def reward_fn(prompt, response):
            return rewards[next(counter)]

        model = toy()
        flat = dataclasses.replace(model, embedding=np.zeros_like(model.embedding))
        pair = sample_and_pair(flat, reward_fn, [5], n_candidates=2, min_gap=0.5, seed=1)
        assert pair is not None
        assert len(pair.chosen) == len(pair.rejected) == 8

    def test_identical_candidates(self):
        model = toy()
        bias = np.full(model.vocab_size, -1e4)
        bias[6] = 0.0
        forced = model.with_logit_bias(bias)
        assert sample_and_pair(forced, token_mean_reward, [1], n_candidates=4) is None

    def test_bad_arguments(self):
        model = toy()
        with pytest.raises(InvalidArgumentError):
            sample_and_pair(model, token_mean_reward, [1], n_candidates=1)
        with pytest.raises(InvalidArgumentError):
            sample_and_pair(model, token_mean_reward, [1], min_gap=-1.0)
        with pytest.raises(InvalidArgumentError):
            sample_and_pair(model, token_mean_reward, [])


class TestRewardHead:
    def test_training_reduces_bt_loss(self):
        model = toy()
        pairs = random_pairs(make_rng(14), 12, model.vocab_size)
        head, losses = train_reward_head(model, pairs, steps=50, lr=0.002)
        assert losses[0] == pytest.approx(LN2)
        assert losses[-1] < losses[0]
        reward = head.reward_fn(model)
        wins = sum(reward(p.prompt, p.chosen) > reward(p.prompt, p.rejected) for p in pairs)
        assert wins > len(pairs) / 2


class TestOnlineDpo:
    def test_stages(self):
        reference = toy()
        offline = random_pairs(make_rng(15), 4, reference.vocab_size)
        result = online_dpo(
            reference,
            reference,
            offline,
            prompts=[[1, 2, 3], [4, 5]],
            reward_fn=token_mean_reward,
            iterations=2,
            steps=3,
            n_candidates=4,
        )
        names = [stage.name for stage in result.stages]
        assert names[0] == "offline"
        assert set(names[1:]) <= {"online-0", "online-1"}
        assert result.stages[0].initial_loss == pytest.approx(LN2)
        assert result.stages[0].final_loss < result.stages[0].initial_loss
        assert all(stage.pairs <= 2 for stage in result.stages[1:])


class TestReadPairs:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text(
            json.dumps({"prompt": [1, 2], "chosen": [3], "rejected": [4]})
            + "\n\n"
            + json.dumps({"prompt": [], "chosen": [5, 6], "rejected": [7]})
            + "\n"
        )
        assert read_pairs(path) == [
            PreferencePair([1, 2], [3], [4]),
            PreferencePair([], [5, 6], [7]),
        ]

    def test_bad_line(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"prompt": [1], "chosen": [2], "rejected": [3]}\n{"prompt": [1]}\n')
        with pytest.raises(InvalidArgumentError, match="Line 2"):
            read_pairs(path)

    @pytest.mark.parametrize(
        "record",
        [
            {"prompt": ["a"], "chosen": [2], "rejected": [3]},
            {"prompt": [1], "chosen": [[2]], "rejected": [3]},
            {"prompt": [1], "chosen": [2], "rejected": [2]},
        ],
    )
    def test_bad_tokens_name_the_line(self, tmp_path, record):
        path = tmp_path / "pairs.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(InvalidArgumentError, match="Line 1"):
            read_pairs(path)
