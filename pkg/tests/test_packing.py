from fractions import Fraction

import numpy as np
import pytest

from ylab.attention import LayerPattern
from ylab.exceptions import InvalidArgumentError
from ylab.kvcache import ToyTransformer
from ylab.numkit import make_rng
from ylab.packing import (
    PAD_TOKEN,
    PackPolicy,
    SampleSpan,
    bca_mask,
    pack,
    packed_loss_check,
    read_token_lines,
    reweight,
    sample_weight_fractions,
    weighted_batch_loss,
)


def samples_of(lengths, seed=0, vocab=32):
    rng = make_rng(seed)
    return [rng.integers(1, vocab, size=length).tolist() for length in lengths]


def toy_model(pattern="3:1", seed=0):
    return ToyTransformer.random(seed, LayerPattern.parse(pattern, window=4), n_layers=4)


def independent_mask(spans, capacity):
    mask = np.zeros((capacity, capacity), dtype=bool)
    for span in spans:
        for t in range(span.start, span.stop):
            for s in range(span.start, t + 1):
                mask[t, s] = True
    return mask


class TestPack:
    def test_two_samples_share_a_sequence(self):
        batch = pack(samples_of([3, 2]), 8)
        assert len(batch.sequences) == 1
        assert [(s.start, s.length) for s in batch.spans[0]] == [(0, 3), (3, 2)]
        assert (batch.sequences[0][5:] == PAD_TOKEN).all()
        assert batch.used_tokens == 5

    def test_first_fit_pigeonhole(self):
        batch = pack(samples_of([5, 5, 5]), 8)
        assert len(batch.sequences) == 3

    def test_greedy_descending_places_longest_first(self):
        lengths = [2, 6, 3, 5]
        first_fit = pack(samples_of(lengths), 8, PackPolicy.FIRST_FIT)
        greedy = pack(samples_of(lengths), 8, PackPolicy.GREEDY_DESCENDING)
        assert [[s.sample_id for s in spans] for spans in first_fit.spans] == [[0, 1], [2, 3]]
        assert [[s.sample_id for s in spans] for spans in greedy.spans] == [[1, 0], [3, 2]]

    def test_tokens_are_conserved_and_spans_disjoint(self):
        lengths = make_rng(12).integers(2, 200, size=50).tolist()
        samples = samples_of(lengths, seed=12)
        batch = pack(samples, 512)
        assert batch.used_tokens == sum(lengths)
        assert sorted(s.sample_id for spans in batch.spans for s in spans) == list(range(50))
        for index, spans in enumerate(batch.spans):
            occupied = np.zeros(512, dtype=int)
            for span in spans:
                occupied[span.start : span.stop] += 1
                np.testing.assert_array_equal(
                    batch.sequences[index][span.start : span.stop], samples[span.sample_id]
                )
            assert occupied.max() <= 1

    def test_deterministic(self):
        samples = samples_of([4, 7, 2, 3, 6], seed=2)
        first, second = pack(samples, 10), pack(samples, 10)
        assert first.spans == second.spans
        for a, b in zip(first.sequences, second.sequences):
            np.testing.assert_array_equal(a, b)

    def test_oversized_sample_is_named(self):
        with pytest.raises(InvalidArgumentError, match="Sample 1"):
            pack(samples_of([3, 9]), 8)

    def test_empty_sample(self):
        with pytest.raises(InvalidArgumentError):
            pack([[1, 2], []], 8)

    def test_single_token_sample_has_no_default_loss_tokens(self):
        with pytest.raises(InvalidArgumentError, match="Sample 0 has 1 tokens and 0 loss tokens"):
            pack([[5], [1, 2, 3]], 8)

    def test_explicit_loss_token_counts(self):
        batch = pack([[5], [1, 2, 3]], 8, loss_token_counts=[1, 2])
        (spans,) = batch.spans
        assert [span.loss_token_count for span in spans] == [1, 2]
        assert batch.token_weights[0].sum() == pytest.approx(1.0)
        with pytest.raises(InvalidArgumentError, match="Sample 1"):
            pack([[5, 6], [1, 2, 3]], 8, loss_token_counts=[1, 4])

    def test_utilization_and_positions(self):
        batch = pack(samples_of([3, 2]), 8)
        assert batch.utilization == 5 / 8
        assert batch.position_ids(0).tolist() == [0, 1, 2, 0, 1, 0, 0, 0]


class TestBcaMask:
    def test_single_span_is_causal(self):
        mask = bca_mask([SampleSpan(0, 0, 6, 5)], 6)
        np.testing.assert_array_equal(mask, np.tril(np.ones((6, 6), dtype=bool)))

    def test_samples_are_isolated(self):
        mask = bca_mask([SampleSpan(0, 0, 3, 2), SampleSpan(1, 3, 2, 1)], 8)
        assert np.flatnonzero(mask[3]).tolist() == [3]
        assert np.flatnonzero(mask[4]).tolist() == [3, 4]
        assert not mask[5:].any()
        assert not mask[:, 5:].any()

    def test_matches_independent_construction(self):
        for seed in range(5):
            lengths = make_rng(seed).integers(2, 12, size=8).tolist()
            batch = pack(samples_of(lengths, seed), 64)
            for spans, mask in zip(batch.spans, batch.masks):
                np.testing.assert_array_equal(mask, independent_mask(spans, 64))
                owner = np.full(64, -1)
                for span in spans:
                    owner[span.start : span.stop] = span.sample_id
                for t in range(64):
                    for s in range(64):
                        if owner[t] != owner[s] or owner[t] < 0:
                            assert not mask[t, s]

    def test_overlapping_spans(self):
        with pytest.raises(InvalidArgumentError):
            bca_mask([SampleSpan(0, 0, 4, 3), SampleSpan(1, 2, 3, 2)], 8)

    def test_span_past_capacity(self):
        with pytest.raises(InvalidArgumentError):
            bca_mask([SampleSpan(0, 6, 4, 3)], 8)


class TestReweight:
    def test_long_and_short_sample_weigh_the_same(self):
        spans = [SampleSpan(0, 0, 10, 10), SampleSpan(1, 10, 2, 2)]
        fractions = sample_weight_fractions(spans, 2)
        assert fractions == {0: Fraction(1, 20), 1: Fraction(1, 4)}
        weights = reweight(spans, 2)
        assert weights[:10].sum() == pytest.approx(0.5)
        assert weights[10:].sum() == pytest.approx(0.5)

    def test_single_sample(self):
        weights = reweight([SampleSpan(0, 0, 4, 4)], 1)
        assert weights.tolist() == [0.25] * 4

    def test_equal_lengths_match_token_mean(self):
        spans = [SampleSpan(i, 3 * i, 3, 3) for i in range(4)]
        np.testing.assert_allclose(reweight(spans, 4), np.full(12, 1 / 12))

    def test_padding_and_first_tokens_weigh_zero(self):
        batch = pack(samples_of([3, 2]), 8)
        weights = batch.token_weights[0]
        assert weights[0] == 0.0 and weights[3] == 0.0
        assert (weights[5:] == 0.0).all()
        assert weights[1] == pytest.approx(0.25)
        assert weights[4] == pytest.approx(0.5)

    def test_batch_weights_sum_to_one_exactly(self):
        lengths = make_rng(4).integers(2, 20, size=9).tolist()
        batch = pack(samples_of(lengths, seed=4), 32)
        total = Fraction(0)
        for spans in batch.spans:
            for sample_id, weight in sample_weight_fractions(spans, batch.sample_count).items():
                span = next(s for s in spans if s.sample_id == sample_id)
                total += weight * span.loss_token_count
                assert weight * span.loss_token_count == Fraction(1, 9)
        assert total == 1

    def test_doubling_a_sample_keeps_its_share(self):
        short = [SampleSpan(0, 0, 5, 4), SampleSpan(1, 5, 3, 2)]
        doubled = [SampleSpan(0, 0, 10, 9), SampleSpan(1, 10, 3, 2)]
        assert reweight(short, 2)[:5].sum() == pytest.approx(0.5)
        assert reweight(doubled, 2)[:10].sum() == pytest.approx(0.5)

    def test_zero_loss_tokens(self):
        with pytest.raises(InvalidArgumentError):
            reweight([SampleSpan(0, 0, 1, 0)], 1)


class TestPackedLoss:
    @pytest.mark.parametrize("pattern", ["full", "3:1"])
    def test_bca_matches_isolated_runs(self, pattern):
        samples = samples_of([5, 7, 3, 9], seed=6)
        packed, isolated = packed_loss_check(toy_model(pattern), samples, 32)
        np.testing.assert_allclose(packed, isolated, atol=1e-9)

    def test_without_bca_later_samples_drift(self):
        samples = samples_of([6, 6], seed=7)
        packed, isolated = packed_loss_check(toy_model("full"), samples, 16, use_bca=False)
        assert packed[0] == pytest.approx(isolated[0], abs=1e-9)
        assert abs(packed[1] - isolated[1]) > 1e-6

    def test_one_sample_per_sequence(self):
        samples = samples_of([6, 6, 6], seed=8)
        packed, isolated = packed_loss_check(toy_model(), samples, 6, use_bca=False)
        np.testing.assert_allclose(packed, isolated, atol=1e-12)

    def test_weighted_loss_is_mean_of_sample_means(self):
        model = toy_model()
        samples = samples_of([4, 9, 2, 6], seed=9)
        _, isolated = packed_loss_check(model, samples, 16)
        batch = pack(samples, 16)
        assert weighted_batch_loss(model, batch) == pytest.approx(np.mean(isolated), abs=1e-9)


class TestReadTokenLines:
    def test_skips_blank_lines(self, tmp_path):
        path = tmp_path / "tokens.txt"
        path.write_text("1 2 3\n\n4 5\n")
        assert read_token_lines(path) == [[1, 2, 3], [4, 5]]

    def test_bad_line_number(self, tmp_path):
        path = tmp_path / "tokens.txt"
        path.write_text("1 2\n3 x\n")
        with pytest.raises(InvalidArgumentError, match="Line 2"):
            read_token_lines(path)
