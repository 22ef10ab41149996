import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum, auto
from itertools import product

import numpy as np

from ylab.exceptions import InvalidArgumentError
from ylab.numkit import Matrix, softmax_rows

DEFAULT_WINDOW = 4096


class AttentionKind(Enum):
    """Attention variant of one layer."""

    SLIDING_WINDOW = auto()  # attends the most recent W positions
    FULL = auto()  # attends every earlier position


@dataclass(frozen=True)
class LayerPattern:
    """
    Repeating layer pattern of a hybrid attention stack.

    `"3:1"` is three sliding-window layers followed by one full layer; the
    pattern tiles across the stack and a trailing partial tile is allowed.
    With `share_full_kv`, consecutive full layers pair up greedily left to
    right; the second layer of a pair reads the first layer's cache and
    stores nothing itself. An odd full layer out keeps its own cache.

    ```
    layer:   0   1   2   3   4   5   6   7
    kind:    S   S   S   F   S   S   S   F
    cache:   W   W   W   L   W   W   W   (reads layer 3)
    ```
    """

    kinds: tuple[AttentionKind, ...]
    window: int = DEFAULT_WINDOW
    share_full_kv: bool = True

    def __post_init__(self):
        if not self.kinds:
            raise InvalidArgumentError("Layer pattern must contain at least one layer")
        if self.window < 1:
            raise InvalidArgumentError(f"Window must be >= 1, got {self.window}")

    @classmethod
    def parse(
        cls, text: str, window: int = DEFAULT_WINDOW, share_full_kv: bool = True
    ) -> "LayerPattern":
        """Accepts `"S:F"` ratios such as `"3:1"`, letter strings such as `"SSSF"`, or `"full"`."""
        normalized = text.strip().lower()
        if normalized in ("full", "all-full"):
            kinds: tuple[AttentionKind, ...] = (AttentionKind.FULL,)
        elif normalized in ("sliding", "all-sliding"):
            kinds = (AttentionKind.SLIDING_WINDOW,)
        elif match := re.fullmatch(r"(\d+):(\d+)", normalized):
            sliding, full = int(match.group(1)), int(match.group(2))
            kinds = (AttentionKind.SLIDING_WINDOW,) * sliding + (AttentionKind.FULL,) * full
        elif re.fullmatch(r"[sf]+", normalized):
            letters = {"s": AttentionKind.SLIDING_WINDOW, "f": AttentionKind.FULL}
            kinds = tuple(letters[letter] for letter in normalized)
        else:
            raise InvalidArgumentError(
                f"Cannot parse layer pattern {text!r}. Expected e.g. '3:1', 'SSSF' or 'full'"
            )
        return cls(kinds=kinds, window=window, share_full_kv=share_full_kv)

    @property
    def label(self) -> str:
        return "".join("F" if kind is AttentionKind.FULL else "S" for kind in self.kinds)

    def tile(self, n_layers: int) -> tuple[AttentionKind, ...]:
        if n_layers < 1:
            raise InvalidArgumentError(f"n_layers must be >= 1, got {n_layers}")
        return tuple(self.kinds[i % len(self.kinds)] for i in range(n_layers))

    def cache_owners(self, n_layers: int) -> tuple[int, ...]:
        """For every layer, the index of the layer whose cache it reads."""
        kinds = self.tile(n_layers)
        owners = list(range(n_layers))
        if self.share_full_kv:
            for owner, borrower in full_layer_pairs(kinds):
                owners[borrower] = owner
        return tuple(owners)


def full_layer_pairs(kinds) -> list[tuple[int, int]]:
    full_layers = [i for i, kind in enumerate(kinds) if kind is AttentionKind.FULL]
    return [(full_layers[i], full_layers[i + 1]) for i in range(0, len(full_layers) - 1, 2)]


@dataclass(frozen=True)
class CacheLayout:
    context_len: int
    n_heads: int
    head_dim: int
    bytes_per_element: int
    per_layer_cached_tokens: tuple[int, ...]
    total_bytes: int
    baseline_bytes: int

    @property
    def reduction(self) -> float:
        """Fraction saved against caching every layer as unshared full attention."""
        return 1.0 - self.total_bytes / self.baseline_bytes

    @property
    def reduction_pct(self) -> float:
        return 100.0 * self.reduction


def bytes_per_cached_token(n_heads: int, head_dim: int, bytes_per_element: int) -> int:
    # K and V
    return 2 * n_heads * head_dim * bytes_per_element


def memory_account(
    pattern: LayerPattern,
    n_layers: int,
    context_len: int,
    n_heads: int = 8,
    head_dim: int = 128,
    bytes_per_element: int = 2,
) -> CacheLayout:
    """Closed-form KV-cache bytes for a tiled pattern at a given context length."""
    if n_layers < 1:
        raise InvalidArgumentError(f"n_layers must be >= 1, got {n_layers}")
    if context_len < 1 or n_heads < 1 or head_dim < 1 or bytes_per_element < 1:
        raise InvalidArgumentError("Cache dimensions must be positive")

    kinds = pattern.tile(n_layers)
    owners = pattern.cache_owners(n_layers)
    cached = []
    for layer, kind in enumerate(kinds):
        if owners[layer] != layer:
            cached.append(0)
        elif kind is AttentionKind.SLIDING_WINDOW:
            cached.append(min(pattern.window, context_len))
        else:
            cached.append(context_len)

    per_token = bytes_per_cached_token(n_heads, head_dim, bytes_per_element)
    return CacheLayout(
        context_len=context_len,
        n_heads=n_heads,
        head_dim=head_dim,
        bytes_per_element=bytes_per_element,
        per_layer_cached_tokens=tuple(cached),
        total_bytes=per_token * sum(cached),
        baseline_bytes=per_token * context_len * n_layers,
    )


@dataclass(frozen=True)
class SweepPoint:
    pattern: str
    window: int
    context_len: int
    share: bool
    n_layers: int = 32
    n_heads: int = 8
    head_dim: int = 128
    bytes_per_element: int = 2


def _sweep_row(point: SweepPoint) -> dict:
    layout = memory_account(
        LayerPattern.parse(point.pattern, point.window, point.share),
        point.n_layers,
        point.context_len,
        point.n_heads,
        point.head_dim,
        point.bytes_per_element,
    )
    return {
        "pattern": point.pattern,
        "window": point.window,
        "context_len": point.context_len,
        "n_layers": point.n_layers,
        "share": int(point.share),
        "total_bytes": layout.total_bytes,
        "baseline_bytes": layout.baseline_bytes,
        "reduction_pct": layout.reduction_pct,
    }


def sweep_memory(
    windows,
    contexts,
    patterns,
    sharing=(True, False),
    jobs: int = 1,
    **layout,
) -> list[dict]:
    """One accounting row per (pattern, window, context, sharing), in sweep order."""
    points = [
        SweepPoint(pattern, window, context, share, **layout)
        for pattern, window, context, share in product(patterns, windows, contexts, sharing)
    ]
    if jobs <= 1:
        return [_sweep_row(point) for point in points]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_row, points))


@dataclass(frozen=True)
class RopeConfig:
    base: float = 10000.0
    head_dim: int = 64

    def __post_init__(self):
        if not self.base > 0:
            raise InvalidArgumentError(f"RoPE base must be > 0, got {self.base}")
        if self.head_dim < 2 or self.head_dim % 2:
            raise InvalidArgumentError(f"RoPE head_dim must be even, got {self.head_dim}")

    def extended(self, factor: float) -> "RopeConfig":
        """Raise the base frequency for context extension."""
        if not factor >= 1:
            raise InvalidArgumentError(f"Extension factor must be >= 1, got {factor}")
        return RopeConfig(base=self.base * factor, head_dim=self.head_dim)

    @property
    def frequencies(self) -> np.ndarray:
        pairs = np.arange(self.head_dim // 2)
        return self.base ** (-2.0 * pairs / self.head_dim)


def rope_angles(positions, config: RopeConfig) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64)[:, None] * config.frequencies[None, :]


def rope_apply(vectors, positions, config: RopeConfig) -> np.ndarray:
    """
    Rotate pairs (x[2j], x[2j+1]) of the last axis by position * base^(-2j/d).

    `vectors` is [tokens, head_dim] or [tokens, heads, head_dim].
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] % 2:
        raise InvalidArgumentError(f"RoPE needs an even head_dim, got {x.shape[-1]}")
    if x.shape[-1] != config.head_dim:
        raise InvalidArgumentError(
            f"Vectors have head_dim {x.shape[-1]}, config expects {config.head_dim}"
        )
    positions = np.asarray(positions)
    if positions.shape != (x.shape[0],):
        raise InvalidArgumentError(
            f"Got {positions.size} positions for {x.shape[0]} rows"
        )

    angles = rope_angles(positions, config)
    angles = angles.reshape(angles.shape[:1] + (1,) * (x.ndim - 2) + angles.shape[1:])
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = np.empty_like(x)
    rotated[..., 0::2] = even * cos - odd * sin
    rotated[..., 1::2] = even * sin + odd * cos
    return rotated


def causal_mask(query_positions, key_positions) -> np.ndarray:
    return np.asarray(key_positions)[None, :] <= np.asarray(query_positions)[:, None]


def window_mask(query_positions, key_positions, window: int, causal: bool = True) -> np.ndarray:
    distance = np.asarray(query_positions)[:, None] - np.asarray(key_positions)[None, :]
    if causal:
        return (distance >= 0) & (distance < window)
    return np.abs(distance) < window


def attend(q: Matrix, k: Matrix, v: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """Scaled dot-product attention; rows with nothing to attend return zeros."""
    q, k, v = (np.asarray(m, dtype=np.float64) for m in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise InvalidArgumentError("q, k and v must be 2-D matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise InvalidArgumentError(
            f"Shapes do not conform: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if mask is not None and mask.shape != (q.shape[0], k.shape[0]):
        raise InvalidArgumentError(
            f"Mask shape {mask.shape} does not match scores {(q.shape[0], k.shape[0])}"
        )
    scores = q @ k.T / np.sqrt(q.shape[1])
    return softmax_rows(scores, mask) @ v


def attend_full(q: Matrix, k: Matrix, v: Matrix, causal: bool = True) -> Matrix:
    length = np.asarray(q).shape[0]
    mask = causal_mask(np.arange(length), np.arange(np.asarray(k).shape[0])) if causal else None
    return attend(q, k, v, mask)


def attend_sliding(
    q: Matrix, k: Matrix, v: Matrix, window: int, causal: bool = True
) -> Matrix:
    """Token t attends positions max(0, t - W + 1) .. t."""
    if window < 1:
        raise InvalidArgumentError(f"Window must be >= 1, got {window}")
    mask = window_mask(
        np.arange(np.asarray(q).shape[0]), np.arange(np.asarray(k).shape[0]), window, causal
    )
    return attend(q, k, v, mask)
