import logging
from dataclasses import dataclass
from enum import Enum, auto
from fractions import Fraction
from pathlib import Path

import numpy as np

from ylab.exceptions import InvalidArgumentError
from ylab.kvcache import ToyTransformer
from ylab.numkit import log_softmax_rows

logger = logging.getLogger(__name__)

PAD_TOKEN = 0


class PackPolicy(Enum):
    """Bin-packing order for samples."""

    FIRST_FIT = auto()  # arrival order, first sequence with room
    GREEDY_DESCENDING = auto()  # longest first, then first fit


@dataclass(frozen=True)
class SampleSpan:
    sample_id: int
    start: int
    length: int
    loss_token_count: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def loss_positions(self) -> range:
        """Target positions carrying loss: the last `loss_token_count` of the span."""
        return range(self.stop - self.loss_token_count, self.stop)


@dataclass(frozen=True)
class PackedBatch:
    """
    Samples concatenated into fixed-capacity sequences.

    ```
    sequence 0:  [ a a a | b b | . . . ]     spans (a, 0, 3) (b, 3, 2)
    mask:         a sees a only, b sees b only, padding sees nothing
    weights:      each sample sums to 1 / samples_in_batch
    ```
    """

    capacity: int
    sequences: tuple[np.ndarray, ...]
    spans: tuple[tuple[SampleSpan, ...], ...]
    masks: tuple[np.ndarray, ...]
    token_weights: tuple[np.ndarray, ...]

    @property
    def sample_count(self) -> int:
        return sum(len(spans) for spans in self.spans)

    @property
    def used_tokens(self) -> int:
        return sum(span.length for spans in self.spans for span in spans)

    @property
    def utilization(self) -> float:
        """Fraction of sequence slots holding real tokens."""
        return self.used_tokens / (self.capacity * len(self.sequences)) if self.sequences else 0.0

    def position_ids(self, index: int) -> np.ndarray:
        """Positions that restart at 0 at the start of every span."""
        positions = np.zeros(self.capacity, dtype=np.int64)
        for span in self.spans[index]:
            positions[span.start : span.stop] = np.arange(span.length)
        return positions


def _place(lengths: list[int], capacity: int, order: list[int]) -> list[list[int]]:
    bins: list[list[int]] = []
    room: list[int] = []
    for sample in order:
        for index, free in enumerate(room):
            if lengths[sample] <= free:
                bins[index].append(sample)
                room[index] -= lengths[sample]
                break
        else:
            bins.append([sample])
            room.append(capacity - lengths[sample])
    return bins


def pack(
    samples,
    capacity: int,
    policy: PackPolicy = PackPolicy.FIRST_FIT,
    loss_token_counts=None,
) -> PackedBatch:
    """
    Pack token sequences into sequences of `capacity` tokens without truncation.

    Loss tokens default to every token except the first of each sample, so a
    sample needs at least two tokens unless `loss_token_counts` says otherwise.
    Every sample must carry at least one loss token.
    """
    if capacity < 1:
        raise InvalidArgumentError(f"Capacity must be >= 1, got {capacity}")
    token_lists = [np.asarray(sample, dtype=np.int64) for sample in samples]
    lengths = [int(tokens.size) for tokens in token_lists]
    for sample_id, length in enumerate(lengths):
        if length < 1:
            raise InvalidArgumentError(f"Sample {sample_id} is empty")
        if length > capacity:
            raise InvalidArgumentError(
                f"Sample {sample_id} has {length} tokens, capacity is {capacity}"
            )
    if loss_token_counts is None:
        loss_token_counts = [length - 1 for length in lengths]
    elif len(loss_token_counts) != len(lengths):
        raise InvalidArgumentError("One loss token count per sample is required")
    for sample_id, count in enumerate(loss_token_counts):
        if not 1 <= count <= lengths[sample_id]:
            raise InvalidArgumentError(
                f"Sample {sample_id} has {lengths[sample_id]} tokens and {count} loss tokens; "
                "every sample needs between 1 loss token and its length"
            )

    order = list(range(len(lengths)))
    if policy is PackPolicy.GREEDY_DESCENDING:
        order.sort(key=lambda sample: -lengths[sample])
    bins = _place(lengths, capacity, order)

    sequences, all_spans = [], []
    for members in bins:
        sequence = np.full(capacity, PAD_TOKEN, dtype=np.int64)
        spans, offset = [], 0
        for sample in members:
            sequence[offset : offset + lengths[sample]] = token_lists[sample]
            spans.append(
                SampleSpan(sample, offset, lengths[sample], int(loss_token_counts[sample]))
            )
            offset += lengths[sample]
        sequences.append(sequence)
        all_spans.append(tuple(spans))

    sample_count = len(lengths)
    masks = tuple(bca_mask(spans, capacity) for spans in all_spans)
    weights = tuple(reweight(spans, sample_count, capacity) for spans in all_spans)
    logger.debug("packed %d samples into %d sequences", sample_count, len(sequences))
    return PackedBatch(capacity, tuple(sequences), tuple(all_spans), masks, weights)


def _check_spans(spans, capacity: int) -> None:
    previous_stop = 0
    for span in sorted(spans, key=lambda s: s.start):
        if span.length < 1 or span.start < 0 or span.stop > capacity:
            raise InvalidArgumentError(f"Span {span} does not fit capacity {capacity}")
        if span.start < previous_stop:
            raise InvalidArgumentError(f"Span of sample {span.sample_id} overlaps another span")
        previous_stop = span.stop


def bca_mask(spans, capacity: int) -> np.ndarray:
    """Block-causal mask: position t sees s iff s <= t and both share a span."""
    _check_spans(spans, capacity)
    mask = np.zeros((capacity, capacity), dtype=bool)
    for span in spans:
        block = slice(span.start, span.stop)
        mask[block, block] = np.tril(np.ones((span.length, span.length), dtype=bool))
    return mask


def sample_weight_fractions(spans, batch_sample_count: int) -> dict[int, Fraction]:
    """Exact per-token loss weight of every sample: 1 / (n * loss tokens)."""
    if batch_sample_count < 1:
        raise InvalidArgumentError(f"Batch needs at least one sample, got {batch_sample_count}")
    weights = {}
    for span in spans:
        if span.loss_token_count < 1:
            raise InvalidArgumentError(f"Sample {span.sample_id} has no loss tokens")
        if span.loss_token_count > span.length:
            raise InvalidArgumentError(
                f"Sample {span.sample_id} has more loss tokens than tokens"
            )
        weights[span.sample_id] = Fraction(1, batch_sample_count * span.loss_token_count)
    return weights


def reweight(spans, batch_sample_count: int, capacity: int | None = None) -> np.ndarray:
    """
    Per-token loss weights so every sample contributes 1 / batch_sample_count.

    Padding and non-loss tokens weigh 0.
    """
    fractions = sample_weight_fractions(spans, batch_sample_count)
    size = capacity if capacity is not None else max((span.stop for span in spans), default=0)
    weights = np.zeros(size)
    for span in spans:
        weights[span.loss_positions().start : span.stop] = float(fractions[span.sample_id])
    return weights


def _token_losses(model: ToyTransformer, tokens, positions=None, segment_mask=None) -> np.ndarray:
    """Cross-entropy of predicting token t from position t-1; entry 0 is unused."""
    tokens = np.asarray(tokens)
    log_probs = log_softmax_rows(model.forward(tokens, positions, segment_mask))
    losses = np.zeros(tokens.size)
    losses[1:] = -log_probs[np.arange(tokens.size - 1), tokens[1:]]
    return losses


def packed_loss_check(
    model: ToyTransformer,
    samples,
    capacity: int,
    use_bca: bool = True,
    policy: PackPolicy = PackPolicy.FIRST_FIT,
) -> tuple[list[float], list[float]]:
    """
    Mean next-token loss of every sample, once inside its packed sequence and
    once run alone. With BCA the two agree; without it later samples see
    earlier ones and drift.
    """
    batch = pack(samples, capacity, policy)
    packed = [0.0] * batch.sample_count
    for index, sequence in enumerate(batch.sequences):
        if use_bca:
            losses = _token_losses(
                model, sequence, batch.position_ids(index), batch.masks[index]
            )
        else:
            losses = _token_losses(model, sequence)
        for span in batch.spans[index]:
            packed[span.sample_id] = float(losses[span.start + 1 : span.stop].mean())

    isolated = [
        float(_token_losses(model, sample)[1:].mean()) for sample in samples
    ]
    return packed, isolated


def weighted_batch_loss(model: ToyTransformer, batch: PackedBatch) -> float:
    """Reweighted loss of a packed batch: sum of token losses times token weights."""
    total = 0.0
    for index, sequence in enumerate(batch.sequences):
        losses = _token_losses(
            model, sequence, batch.position_ids(index), batch.masks[index]
        )
        total += float(losses @ batch.token_weights[index])
    return total


def read_token_lines(path: Path | str) -> list[list[int]]:
    """One sample per non-blank line of whitespace-separated integer tokens."""
    samples = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            samples.append([int(token) for token in line.split()])
        except ValueError:
            raise InvalidArgumentError(f"Line {number} of {path} is not a list of integers")
    return samples
