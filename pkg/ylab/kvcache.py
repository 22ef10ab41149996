import logging
from dataclasses import dataclass, field

import numpy as np

from ylab.attention import (
    AttentionKind,
    LayerPattern,
    RopeConfig,
    attend,
    bytes_per_cached_token,
    causal_mask,
    memory_account,
    rope_apply,
    window_mask,
)
from ylab.exceptions import CacheStateError, InvalidArgumentError
from ylab.numkit import Matrix, make_rng

logger = logging.getLogger(__name__)


@dataclass
class ToyTransformer:
    """
    Attention-only transformer used to exercise cache mechanics.

    Embeddings feed a stack of attention layers laid out by `pattern` (no FFN,
    no normalisation, residual adds only) and a readout tied to the embedding
    table plus a `logit_bias`. The second layer of a shared full pair has no
    key/value projections: it attends over the keys and values its owner layer
    produced.
    """

    pattern: LayerPattern
    n_layers: int
    n_heads: int
    rope: RopeConfig
    embedding: Matrix
    wq: list[Matrix]
    wk: list[Matrix | None]
    wv: list[Matrix | None]
    logit_bias: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_model(self) -> int:
        return self.embedding.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kinds(self) -> tuple[AttentionKind, ...]:
        return self.pattern.tile(self.n_layers)

    @property
    def owners(self) -> tuple[int, ...]:
        return self.pattern.cache_owners(self.n_layers)

    @classmethod
    def random(
        cls,
        seed: int,
        pattern: LayerPattern,
        n_layers: int = 4,
        vocab_size: int = 32,
        d_model: int = 16,
        n_heads: int = 2,
        rope_base: float = 10000.0,
    ) -> "ToyTransformer":
        if d_model % n_heads:
            raise InvalidArgumentError(
                f"d_model={d_model} is not divisible by n_heads={n_heads}"
            )
        rng = make_rng(seed)
        scale = 1.0 / np.sqrt(d_model)
        owners = pattern.cache_owners(n_layers)

        def projection():
            return rng.normal(0.0, scale, size=(d_model, d_model))

        embedding = rng.normal(0.0, scale, size=(vocab_size, d_model))
        wq, wk, wv = [], [], []
        for layer in range(n_layers):
            wq.append(projection())
            if owners[layer] == layer:
                wk.append(projection())
                wv.append(projection())
            else:
                wk.append(None)
                wv.append(None)
        return cls(
            pattern=pattern,
            n_layers=n_layers,
            n_heads=n_heads,
            rope=RopeConfig(base=rope_base, head_dim=d_model // n_heads),
            embedding=embedding,
            wq=wq,
            wk=wk,
            wv=wv,
            logit_bias=np.zeros(vocab_size),
        )

    def with_logit_bias(self, logit_bias) -> "ToyTransformer":
        bias = np.asarray(logit_bias, dtype=np.float64)
        if bias.shape != (self.vocab_size,):
            raise InvalidArgumentError(
                f"logit_bias must have {self.vocab_size} entries, got {bias.shape}"
            )
        return ToyTransformer(
            self.pattern, self.n_layers, self.n_heads, self.rope,
            self.embedding, self.wq, self.wk, self.wv, bias.copy(),
        )

    def check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1:
            raise InvalidArgumentError("Token sequence must be one-dimensional")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise InvalidArgumentError(
                f"Token ids must lie in [0, {self.vocab_size}), got {ids.min()}..{ids.max()}"
            )
        return ids

    def _heads(self, x: Matrix) -> np.ndarray:
        return x.reshape(x.shape[0], self.n_heads, self.head_dim)

    def _attend_heads(self, q, k, v, mask) -> Matrix:
        out = np.stack(
            [attend(q[:, h], k[:, h], v[:, h], mask) for h in range(self.n_heads)],
            axis=1,
        )
        return out.reshape(q.shape[0], self.d_model)

    def hidden_states(self, tokens, positions=None, segment_mask=None) -> Matrix:
        """
        Whole-sequence forward up to the readout.

        `positions` feed RoPE (default 0..T-1). Causal and window masks follow
        the row index; `segment_mask` is ANDed on top, which is how packed
        sequences isolate their samples.
        """
        ids = self.check_tokens(tokens)
        length = ids.size
        index = np.arange(length)
        positions = index if positions is None else np.asarray(positions)
        masks = {
            AttentionKind.FULL: causal_mask(index, index),
            AttentionKind.SLIDING_WINDOW: window_mask(index, index, self.pattern.window),
        }
        if segment_mask is not None:
            masks = {kind: mask & segment_mask for kind, mask in masks.items()}

        h = self.embedding[ids]
        shared: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for layer, (kind, owner) in enumerate(zip(self.kinds, self.owners)):
            q = rope_apply(self._heads(h @ self.wq[layer]), positions, self.rope)
            if owner == layer:
                k = rope_apply(self._heads(h @ self.wk[layer]), positions, self.rope)
                v = self._heads(h @ self.wv[layer])
                shared[layer] = (k, v)
            else:
                k, v = shared[owner]
            h = h + self._attend_heads(q, k, v, masks[kind])
        return h

    def readout(self, h: Matrix) -> Matrix:
        return h @ self.embedding.T + self.logit_bias

    def forward(self, tokens, positions=None, segment_mask=None) -> Matrix:
        return self.readout(self.hidden_states(tokens, positions, segment_mask))


@dataclass
class LayerBuffer:
    """
    Key/value rows of one physical cache, tagged with absolute positions.

    A sliding-window buffer is a ring of `capacity` slots; a full buffer grows.
    """

    kind: AttentionKind
    capacity: int | None
    n_heads: int
    head_dim: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    last_read_rows: int = 0
    total_read_rows: int = 0

    def write(self, position: int, key: np.ndarray, value: np.ndarray) -> None:
        if self.capacity is None or len(self.positions) < self.capacity:
            self.keys.append(key)
            self.values.append(value)
            self.positions.append(position)
            return
        slot = position % self.capacity
        self.keys[slot] = key
        self.values[slot] = value
        self.positions[slot] = position

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.positions, kind="stable")
        self.last_read_rows = len(order)
        self.total_read_rows += len(order)
        keys = np.stack([self.keys[i] for i in order])
        values = np.stack([self.values[i] for i in order])
        return keys, values

    @property
    def stored_rows(self) -> int:
        return len(self.positions)

    def snapshot(self) -> tuple:
        return (list(self.keys), list(self.values), list(self.positions))

    def restore(self, state: tuple) -> None:
        keys, values, positions = state
        self.keys, self.values, self.positions = list(keys), list(values), list(positions)


@dataclass(frozen=True)
class KvCheckpoint:
    cache_id: int
    position: int
    buffers: dict


@dataclass
class KvCache:
    """Per-session decoding cache. One writer at a time."""

    buffers: dict[int, LayerBuffer]
    owners: tuple[int, ...]
    position: int = 0

    @classmethod
    def for_pattern(
        cls, pattern: LayerPattern, n_layers: int, n_heads: int, head_dim: int
    ) -> "KvCache":
        """One physical buffer per cache-owning layer; borrowers get none."""
        owners = pattern.cache_owners(n_layers)
        buffers = {}
        for layer, kind in enumerate(pattern.tile(n_layers)):
            if owners[layer] != layer:
                continue
            capacity = pattern.window if kind is AttentionKind.SLIDING_WINDOW else None
            buffers[layer] = LayerBuffer(kind, capacity, n_heads, head_dim)
        return cls(buffers=buffers, owners=owners)

    @classmethod
    def for_model(cls, model: ToyTransformer) -> "KvCache":
        return cls.for_pattern(model.pattern, model.n_layers, model.n_heads, model.head_dim)

    @property
    def physical_buffer_count(self) -> int:
        return len(self.buffers)

    def buffer_for(self, layer: int) -> LayerBuffer:
        return self.buffers[self.owners[layer]]

    def stored_bytes(self, bytes_per_element: int = 2) -> int:
        """Walk every physical buffer and count the bytes its rows occupy."""
        total = 0
        for buffer in self.buffers.values():
            per_row = bytes_per_cached_token(buffer.n_heads, buffer.head_dim, bytes_per_element)
            total += buffer.stored_rows * per_row
        return total

    def checkpoint(self) -> KvCheckpoint:
        return KvCheckpoint(
            cache_id=id(self),
            position=self.position,
            buffers={layer: buffer.snapshot() for layer, buffer in self.buffers.items()},
        )

    def rollback(self, checkpoint: KvCheckpoint) -> None:
        if checkpoint.cache_id != id(self) or set(checkpoint.buffers) != set(self.buffers):
            raise CacheStateError("Checkpoint was taken from a different cache")
        if checkpoint.position > self.position:
            raise CacheStateError(
                f"Cannot roll forward from position {self.position} to {checkpoint.position}"
            )
        for layer, state in checkpoint.buffers.items():
            self.buffers[layer].restore(state)
        self.position = checkpoint.position


def decode_step(
    model: ToyTransformer,
    cache: KvCache,
    token: int,
    position: int | None = None,
) -> tuple[np.ndarray, KvCache]:
    """Feed one token at the cache's next position; returns its logits."""
    if cache.owners != model.owners:
        raise CacheStateError("Cache layout does not match the model's sharing map")
    if position is not None and position != cache.position:
        raise CacheStateError(
            f"Cache holds {cache.position} tokens, cannot decode position {position}"
        )
    ids = model.check_tokens([token])
    pos = np.array([cache.position])

    h = model.embedding[ids]
    for layer, owner in enumerate(model.owners):
        q = rope_apply(model._heads(h @ model.wq[layer]), pos, model.rope)
        buffer = cache.buffer_for(layer)
        if owner == layer:
            k = rope_apply(model._heads(h @ model.wk[layer]), pos, model.rope)
            v = model._heads(h @ model.wv[layer])
            buffer.write(cache.position, k[0], v[0])
        keys, values = buffer.read()
        h = h + model._attend_heads(q, keys, values, None)

    cache.position += 1
    return model.readout(h)[0], cache


def prefill(model: ToyTransformer, cache: KvCache, tokens) -> Matrix:
    """Decode `tokens` one by one; returns the logits of every step."""
    rows = [decode_step(model, cache, int(token))[0] for token in model.check_tokens(tokens)]
    return np.stack(rows) if rows else np.zeros((0, model.vocab_size))


@dataclass(frozen=True)
class DecodeCheckResult:
    pattern: str
    share: bool
    seed: int
    max_abs_diff: float
    cache_bytes: int
    closed_form_bytes: int

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= 1e-9 and self.cache_bytes == self.closed_form_bytes


def decode_check(
    seeds=range(5),
    n_tokens: int = 32,
    patterns=("full", "3:1"),
    sharing=(True, False),
    n_layers: int = 8,
    window: int = 4,
) -> list[DecodeCheckResult]:
    """Incremental decoding against whole-sequence forwards for each pattern and seed."""
    results = []
    for text in patterns:
        for share in sharing:
            pattern = LayerPattern.parse(text, window=window, share_full_kv=share)
            for seed in seeds:
                model = ToyTransformer.random(seed, pattern, n_layers=n_layers)
                tokens = make_rng(seed).integers(0, model.vocab_size, size=n_tokens)
                cache = KvCache.for_model(model)
                incremental = prefill(model, cache, tokens)
                whole = model.forward(tokens)
                closed = memory_account(
                    pattern, n_layers, n_tokens, model.n_heads, model.head_dim
                ).total_bytes
                results.append(
                    DecodeCheckResult(
                        pattern=text,
                        share=share,
                        seed=seed,
                        max_abs_diff=float(np.max(np.abs(incremental - whole))),
                        cache_bytes=cache.stored_bytes(),
                        closed_form_bytes=closed,
                    )
                )
                logger.debug("decode check %s share=%s seed=%d", text, share, seed)
    return results
