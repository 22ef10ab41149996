from collections.abc import Callable

import numpy as np

from ylab.exceptions import InvalidArgumentError, NumericError

Matrix = np.ndarray
"""Row-major 64-bit float matrix. All entries finite unless an op says otherwise."""

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """
    Seeded generator used everywhere in ylab.

    PCG64 (a 128-bit LCG with a permuted output function) is pinned instead of
    the numpy default so a seed maps to the same stream on every platform and
    numpy release.
    """
    if seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seed(seed: int, index: int) -> int:
    """Derive a child seed for sweep point or variant `index`."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise InvalidArgumentError(f"Expected a 2-D matrix, got shape {matrix.shape}")
    if rows is not None and matrix.shape[0] != rows:
        raise InvalidArgumentError(f"Expected {rows} rows, got {matrix.shape[0]}")
    if cols is not None and matrix.shape[1] != cols:
        raise InvalidArgumentError(f"Expected {cols} columns, got {matrix.shape[1]}")
    if not np.all(np.isfinite(matrix)):
        raise InvalidArgumentError("Matrix contains non-finite entries")
    return matrix


def _as_vector(values) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size == 0:
        raise InvalidArgumentError("Expected a non-empty vector")
    if not np.all(np.isfinite(vector)):
        raise InvalidArgumentError("Vector contains non-finite entries")
    return vector


def softmax(logits) -> np.ndarray:
    """Stable softmax of a vector (max-subtraction before exp)."""
    vector = _as_vector(logits)
    shifted = np.exp(vector - vector.max())
    return shifted / shifted.sum()


def log_softmax(logits) -> np.ndarray:
    vector = _as_vector(logits)
    shifted = vector - vector.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax_rows(logits: Matrix, mask: np.ndarray | None = None) -> Matrix:
    """
    Row-wise softmax. Positions where `mask` is False get probability 0.
    A fully masked row comes back as all zeros.
    """
    scores = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    weights = np.exp(scores - row_max)
    totals = weights.sum(axis=-1, keepdims=True)
    return np.divide(weights, totals, out=np.zeros_like(weights), where=totals > 0)


def log_softmax_rows(logits: Matrix) -> Matrix:
    scores = np.asarray(logits, dtype=np.float64)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_vjp(probs: Matrix, upstream: Matrix) -> Matrix:
    """Pull a gradient w.r.t. softmax outputs back to the pre-softmax logits."""
    inner = np.sum(probs * upstream, axis=-1, keepdims=True)
    return probs * (upstream - inner)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def topk(values, k: int) -> tuple[np.ndarray, np.ndarray]:
    """
    The k largest entries, sorted descending. Ties go to the lowest index.
    """
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or not 1 <= k <= vector.size:
        raise InvalidArgumentError(f"k must lie in [1, {vector.size}], got {k}")
    # stable sort on the negated values keeps equal entries in index order
    order = np.argsort(-vector, kind="stable")[:k]
    return order, vector[order]


def topk_rows(values: Matrix, k: int) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if not 1 <= k <= matrix.shape[1]:
        raise InvalidArgumentError(f"k must lie in [1, {matrix.shape[1]}], got {k}")
    return np.argsort(-matrix, axis=1, kind="stable")[:, :k]


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    point,
    step: float = 1e-5,
) -> float:
    """
    Compare an analytic gradient against central differences.

    Each coordinate is perturbed by +/- `step`; the relative error of a
    coordinate is |a - n| / max(|a|, |n|, 1e-8). Returns the largest one.
    """
    if step <= 0:
        raise InvalidArgumentError(f"Step must be positive, got {step}")
    x = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if analytic.shape != x.shape:
        raise InvalidArgumentError(
            f"Gradient has {analytic.size} entries, point has {x.size}"
        )
    shape = np.shape(point)
    numeric = np.empty_like(x)
    for i in range(x.size):
        original = x[i]
        x[i] = original + step
        upper = float(f(x.reshape(shape)))
        x[i] = original - step
        lower = float(f(x.reshape(shape)))
        x[i] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericError(f"Function is not finite around coordinate {i}")
        numeric[i] = (upper - lower) / (2.0 * step)

    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def cross_entropy(logits, target: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy of one logit vector and its gradient."""
    vector = _as_vector(logits)
    if not 0 <= target < vector.size:
        raise InvalidArgumentError(f"Target {target} outside [0, {vector.size})")
    log_probs = log_softmax(vector)
    grad = np.exp(log_probs)
    grad[target] -= 1.0
    return float(-log_probs[target]), grad
