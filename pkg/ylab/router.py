import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum, auto

import numpy as np

from ylab.exceptions import InvalidArgumentError, NumericError
from ylab.numkit import (
    Matrix,
    as_matrix,
    make_rng,
    softmax_rows,
    softmax_vjp,
    spawn_seed,
    topk_rows,
)

logger = logging.getLogger(__name__)


class Scope(Enum):
    """Granularity at which balance statistics are collected."""

    GLOBAL = auto()  # all N experts, whole batch
    GROUP = auto()  # one expert-parallel group, tokens argmaxed into it
    PARTITION = auto()  # one partition inside a group


@dataclass(frozen=True)
class ExpertTopology:
    """
    Expert layout across expert-parallel groups and their partitions.

    Experts are numbered contiguously, so group `g` owns experts
    `[g * N^g, (g + 1) * N^g)` and partition `p` (numbered globally) owns
    `[p * N^p, (p + 1) * N^p)`.

    ```
    ┌──────────────── N experts ────────────────┐
    ├──────── group 0 ───────┬──── group 1 ─────┤
    ├─ part 0 ─┬─ part 1 ────┼─ part 2 ┬ part 3 ┤
    │  e0  e1  │  e2  e3     │ e4  e5  │ e6  e7 │
    └──────────┴─────────────┴─────────┴────────┘
    ```
    """

    n_experts: int
    n_groups: int
    experts_per_group: int
    partitions_per_group: int
    experts_per_partition: int
    top_k: int

    def __post_init__(self):
        counts = {
            "n_experts": self.n_experts,
            "n_groups": self.n_groups,
            "experts_per_group": self.experts_per_group,
            "partitions_per_group": self.partitions_per_group,
            "experts_per_partition": self.experts_per_partition,
            "top_k": self.top_k,
        }
        for name, value in counts.items():
            if value < 1:
                raise InvalidArgumentError(f"{name} must be >= 1, got {value}")
        if self.n_experts != self.n_groups * self.experts_per_group:
            raise InvalidArgumentError(
                f"n_experts={self.n_experts} != n_groups * experts_per_group "
                f"= {self.n_groups * self.experts_per_group}"
            )
        if self.experts_per_group != self.partitions_per_group * self.experts_per_partition:
            raise InvalidArgumentError(
                f"experts_per_group={self.experts_per_group} != partitions_per_group "
                f"* experts_per_partition = "
                f"{self.partitions_per_group * self.experts_per_partition}"
            )
        if self.top_k > self.n_experts:
            raise InvalidArgumentError(
                f"top_k={self.top_k} exceeds n_experts={self.n_experts}"
            )

    @classmethod
    def build(
        cls,
        n_groups: int,
        partitions_per_group: int,
        experts_per_partition: int,
        top_k: int = 1,
    ) -> "ExpertTopology":
        experts_per_group = partitions_per_group * experts_per_partition
        return cls(
            n_experts=n_groups * experts_per_group,
            n_groups=n_groups,
            experts_per_group=experts_per_group,
            partitions_per_group=partitions_per_group,
            experts_per_partition=experts_per_partition,
            top_k=top_k,
        )

    @property
    def n_partitions(self) -> int:
        return self.n_groups * self.partitions_per_group

    def group_of(self, expert):
        return np.asarray(expert) // self.experts_per_group

    def partition_of(self, expert):
        return np.asarray(expert) // self.experts_per_partition

    def group_experts(self, group: int) -> range:
        start = group * self.experts_per_group
        return range(start, start + self.experts_per_group)

    def partition_experts(self, partition: int) -> range:
        start = partition * self.experts_per_partition
        return range(start, start + self.experts_per_partition)

    def scope_count(self, scope: Scope) -> int:
        return {
            Scope.GLOBAL: 1,
            Scope.GROUP: self.n_groups,
            Scope.PARTITION: self.n_partitions,
        }[scope]

    def scope_experts(self, scope: Scope, index: int) -> range:
        if not 0 <= index < self.scope_count(scope):
            raise InvalidArgumentError(
                f"{scope.name.lower()} index {index} outside "
                f"[0, {self.scope_count(scope)})"
            )
        if scope is Scope.GLOBAL:
            return range(self.n_experts)
        if scope is Scope.GROUP:
            return self.group_experts(index)
        return self.partition_experts(index)


@dataclass(frozen=True)
class LossCoefficients:
    alpha_st: float = 1e-6
    alpha_ep: float = 1e-4
    alpha_pep: float = 1e-3

    def __post_init__(self):
        for name in ("alpha_st", "alpha_ep", "alpha_pep"):
            value = getattr(self, name)
            if not value >= 0:
                raise InvalidArgumentError(f"{name} must be >= 0, got {value}")


DEFAULT_COEFFICIENTS = LossCoefficients()
ZERO_COEFFICIENTS = LossCoefficients(0.0, 0.0, 0.0)
# Only the global term. On a hierarchical topology the scoped terms are
# minimised by collapsing onto one partition, so gradient descent under
# DEFAULT_COEFFICIENTS does not reach a uniform global load.
GLOBAL_BALANCE_COEFFICIENTS = LossCoefficients(alpha_st=1e-3, alpha_ep=0.0, alpha_pep=0.0)


@dataclass(frozen=True)
class GateOutput:
    """
    Routing probabilities p_i(x) per token and the top-k experts picked from
    them. Probabilities are not renormalised over the selected experts.
    """

    probs: Matrix
    selected: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.probs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def assignment(self) -> np.ndarray:
        """Argmax expert per token; first index wins ties."""
        return self.selected[:, 0]


def gate_from_probs(probs, top_k: int) -> GateOutput:
    matrix = as_matrix(probs)
    return GateOutput(probs=matrix, selected=topk_rows(matrix, top_k))


def gate_from_logits(logits, top_k: int) -> GateOutput:
    return gate_from_probs(softmax_rows(as_matrix(logits)), top_k)


def gate(token_embeddings, gate_weights, top_k: int) -> GateOutput:
    """Linear gate followed by a softmax over experts."""
    embeddings = as_matrix(token_embeddings)
    weights = as_matrix(gate_weights)
    if embeddings.shape[1] != weights.shape[0]:
        raise InvalidArgumentError(
            f"Embeddings have width {embeddings.shape[1]}, "
            f"gate weights expect {weights.shape[0]}"
        )
    if not 1 <= top_k <= weights.shape[1]:
        raise InvalidArgumentError(
            f"top_k must lie in [1, {weights.shape[1]}], got {top_k}"
        )
    return gate_from_logits(embeddings @ weights, top_k)


def mix_toward_one_hot(gate_output: GateOutput, expert: int, weight: float) -> GateOutput:
    """Blend every token's probabilities with the one-hot vector of `expert`."""
    if not 0.0 <= weight <= 1.0:
        raise InvalidArgumentError(f"Mixing weight must lie in [0, 1], got {weight}")
    one_hot = np.zeros(gate_output.n_experts)
    one_hot[expert] = 1.0
    mixed = (1.0 - weight) * gate_output.probs + weight * one_hot
    return gate_from_probs(mixed, gate_output.selected.shape[1])


@dataclass(frozen=True)
class BalanceStats:
    scope: Scope
    scope_index: int
    token_fraction: np.ndarray
    mean_prob: np.ndarray
    scope_token_count: int

    @property
    def n_experts(self) -> int:
        return self.token_fraction.size


def _scope_batch(assignment, topology: ExpertTopology, scope: Scope, index: int):
    experts = topology.scope_experts(scope, index)
    if scope is Scope.GLOBAL:
        member = np.ones(assignment.shape, dtype=bool)
    else:
        member = (assignment >= experts.start) & (assignment < experts.stop)
    return experts, member


def _stats_from_assignment(
    probs, assignment, topology: ExpertTopology, scope: Scope, index: int
) -> BalanceStats:
    experts, member = _scope_batch(assignment, topology, scope, index)
    count = int(member.sum())
    if count == 0:
        zeros = np.zeros(len(experts))
        return BalanceStats(scope, index, zeros, zeros.copy(), 0)

    tally = np.bincount(assignment[member], minlength=topology.n_experts)
    token_fraction = tally[experts.start : experts.stop] / count
    mean_prob = probs[member][:, experts.start : experts.stop].mean(axis=0)
    return BalanceStats(scope, index, token_fraction, mean_prob, count)


def balance_stats(
    gate_output: GateOutput,
    topology: ExpertTopology,
    scope: Scope,
    scope_index: int = 0,
) -> BalanceStats:
    """
    f and P restricted to one scope.

    A token belongs to a group or partition when its argmax expert lies
    there. An empty scope yields zero vectors and a token count of 0.
    """
    if gate_output.n_experts != topology.n_experts:
        raise InvalidArgumentError(
            f"Gate has {gate_output.n_experts} experts, topology has {topology.n_experts}"
        )
    return _stats_from_assignment(
        gate_output.probs, gate_output.assignment, topology, scope, scope_index
    )


def scope_stats(
    gate_output: GateOutput, topology: ExpertTopology, scope: Scope
) -> list[BalanceStats]:
    return [
        balance_stats(gate_output, topology, scope, index)
        for index in range(topology.scope_count(scope))
    ]


def _scoped_loss(stats: list[BalanceStats], alpha: float, scope: Scope) -> float:
    total = 0.0
    for item in stats:
        if item.scope is not scope:
            raise InvalidArgumentError(
                f"Expected {scope.name} statistics, got {item.scope.name}"
            )
        total += alpha * item.n_experts * float(item.token_fraction @ item.mean_prob)
    return total


def loss_st(stats: BalanceStats, alpha: float) -> float:
    """alpha * N * sum_i f_i P_i over the whole batch."""
    return _scoped_loss([stats], alpha, Scope.GLOBAL)


def loss_ep(stats: list[BalanceStats], alpha: float) -> float:
    """Sum over EP groups of alpha * N^g * sum_i f^g_i P^g_i."""
    return _scoped_loss(stats, alpha, Scope.GROUP)


def loss_pep(stats: list[BalanceStats], alpha: float) -> float:
    """Sum over partitions of alpha * N^p * sum_i f^p_i P^p_i."""
    return _scoped_loss(stats, alpha, Scope.PARTITION)


def _aux_terms(probs, assignment, topology: ExpertTopology, coeffs: LossCoefficients):
    """Loss value and its gradient w.r.t. the probabilities, f held fixed."""
    loss = 0.0
    upstream = np.zeros_like(probs)
    for scope, alpha in (
        (Scope.GLOBAL, coeffs.alpha_st),
        (Scope.GROUP, coeffs.alpha_ep),
        (Scope.PARTITION, coeffs.alpha_pep),
    ):
        if alpha == 0.0:
            continue
        for index in range(topology.scope_count(scope)):
            stats = _stats_from_assignment(probs, assignment, topology, scope, index)
            if stats.scope_token_count == 0:
                continue
            experts, member = _scope_batch(assignment, topology, scope, index)
            scale = alpha * stats.n_experts
            loss += scale * float(stats.token_fraction @ stats.mean_prob)
            rows = np.flatnonzero(member)
            upstream[rows[:, None], np.arange(experts.start, experts.stop)] += (
                scale * stats.token_fraction / stats.scope_token_count
            )
    return loss, upstream


def combined_aux_loss(
    gate_output: GateOutput,
    topology: ExpertTopology,
    coeffs: LossCoefficients = DEFAULT_COEFFICIENTS,
) -> tuple[float, Matrix]:
    """
    L_ST + L_EP + L_PEP and its gradient w.r.t. the pre-softmax gate logits.

    f is a stop-gradient: only the P terms carry gradient.
    """
    loss, upstream = _aux_terms(
        gate_output.probs, gate_output.assignment, topology, coeffs
    )
    return loss, softmax_vjp(gate_output.probs, upstream)


def frozen_aux_loss(
    logits,
    assignment,
    topology: ExpertTopology,
    coeffs: LossCoefficients = DEFAULT_COEFFICIENTS,
) -> float:
    """Auxiliary loss as a function of the logits with argmax assignments frozen."""
    probs = softmax_rows(as_matrix(logits))
    loss, _ = _aux_terms(probs, np.asarray(assignment), topology, coeffs)
    return loss


@dataclass(frozen=True)
class GridMinimum:
    topology: ExpertTopology
    coeffs: LossCoefficients
    minimum: float
    argmin: tuple[float, ...]
    uniform_value: float
    at_or_below_uniform: int
    points: int

    @property
    def n_experts(self) -> int:
        return self.topology.n_experts


def one_hot_gate(counts) -> GateOutput:
    """Gate output with `counts[i]` tokens routed one-hot to expert i."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0 or counts.min() < 0 or counts.sum() == 0:
        raise InvalidArgumentError(f"Need non-negative counts with a positive total, got {counts}")
    return gate_from_probs(np.repeat(np.eye(counts.size), counts, axis=0), 1)


def balance_grid_minimum(
    topology: ExpertTopology,
    coeffs: LossCoefficients = DEFAULT_COEFFICIENTS,
    step: float = 0.05,
) -> GridMinimum:
    """
    Brute-force `combined_aux_loss` over a simplex grid of expert loads q.

    Each grid point becomes a batch of one-hot tokens, q_i of them on expert i,
    so f = P = q inside every scope. The grid holds every q whose entries are
    multiples of `step` and sum to 1. The uniform load is evaluated with one
    token per expert, so it is exact even when it is not a grid point.
    """
    divisions = int(round(1.0 / step))
    if divisions < 1 or abs(divisions * step - 1.0) > 1e-12:
        raise InvalidArgumentError(f"1/step must be a whole number, got step={step}")
    n_experts = topology.n_experts

    def evaluate(counts) -> float:
        loss, _ = combined_aux_loss(one_hot_gate(counts), topology, coeffs)
        return loss

    uniform_value = evaluate(np.ones(n_experts, dtype=np.int64))
    best_value = np.inf
    best_point: tuple[float, ...] = ()
    points = at_or_below = 0
    # stars and bars: choose n-1 cut positions among divisions + n - 1 slots
    for cuts in itertools.combinations(range(divisions + n_experts - 1), n_experts - 1):
        bounds = (-1,) + cuts + (divisions + n_experts - 1,)
        parts = np.diff(bounds) - 1
        value = evaluate(parts)
        points += 1
        if value <= uniform_value * (1.0 + 1e-9):
            at_or_below += 1
        if value < best_value:
            best_value = value
            best_point = tuple(float(x) for x in parts / divisions)

    return GridMinimum(
        topology=topology,
        coeffs=coeffs,
        minimum=float(best_value),
        argmin=best_point,
        uniform_value=uniform_value,
        at_or_below_uniform=at_or_below,
        points=points,
    )


@dataclass(frozen=True)
class FfnConfig:
    """Expert FFN layer shape: each expert is d_model -> hidden -> d_model."""

    n_experts: int
    hidden: int
    top_k: int
    d_model: int = 1024

    @property
    def total_params(self) -> int:
        return self.n_experts * ffn_param_count(self.d_model, self.hidden)

    @property
    def activated_params(self) -> int:
        return self.top_k * ffn_param_count(self.d_model, self.hidden)


def ffn_param_count(d_model: int, hidden: int) -> int:
    """Weights of one expert FFN: an up and a down projection, 2 * d * h."""
    up = d_model * hidden
    down = hidden * d_model
    return up + down


@dataclass(frozen=True)
class SegmentedConfig:
    base: FfnConfig
    segment_factor: int
    segmented: FfnConfig

    @property
    def base_experts(self) -> int:
        return self.base.n_experts

    @property
    def base_hidden(self) -> int:
        return self.base.hidden

    @property
    def base_top_k(self) -> int:
        return self.base.top_k

    @property
    def seg_experts(self) -> int:
        return self.segmented.n_experts

    @property
    def seg_hidden(self) -> int:
        return self.segmented.hidden

    @property
    def seg_top_k(self) -> int:
        return self.segmented.top_k

    def report(self) -> dict:
        return {
            "segment_factor": self.segment_factor,
            "experts": [self.base_experts, self.seg_experts],
            "hidden": [self.base_hidden, self.seg_hidden],
            "top_k": [self.base_top_k, self.seg_top_k],
            "total_params": [self.base.total_params, self.segmented.total_params],
            "activated_params": [
                self.base.activated_params,
                self.segmented.activated_params,
            ],
        }


def segment(base: FfnConfig, m: int) -> SegmentedConfig:
    """Split every expert FFN into m narrower experts and activate m times as many."""
    if m < 1:
        raise InvalidArgumentError(f"Segmentation factor must be >= 1, got {m}")
    if base.hidden % m != 0:
        raise InvalidArgumentError(
            f"Hidden dimension {base.hidden} is not divisible by segmentation factor {m}"
        )
    segmented = FfnConfig(
        n_experts=base.n_experts * m,
        hidden=base.hidden // m,
        top_k=base.top_k * m,
        d_model=base.d_model,
    )
    return SegmentedConfig(base=base, segment_factor=m, segmented=segmented)


class GateInit(Enum):
    """Starting point for gate training."""

    UNIFORM = auto()  # type t routed to expert t mod N, balanced by construction
    ADVERSARIAL = auto()  # bias feature puts nearly all mass on expert 0
    RANDOM = auto()  # small Gaussian weights


@dataclass(frozen=True)
class TokenSource:
    """
    Seeded stream of toy token embeddings.

    Each embedding is `[type one-hot | Gaussian noise | 1.0]`. The trailing
    constant feature lets a linear gate carry a per-expert bias. Types are
    drawn from `type_weights` (uniform when omitted) or, with
    `round_robin_types`, assigned cyclically so every type is equally frequent.
    """

    seed: int = 42
    n_types: int = 8
    noise_dim: int = 8
    tokens_per_step: int = 512
    type_weights: tuple[float, ...] | None = None
    noise_scale: float = 1.0
    round_robin_types: bool = False

    def __post_init__(self):
        if self.n_types < 1 or self.tokens_per_step < 1 or self.noise_dim < 0:
            raise InvalidArgumentError("Token source sizes must be positive")
        if self.type_weights is not None:
            if len(self.type_weights) != self.n_types:
                raise InvalidArgumentError(
                    f"type_weights has {len(self.type_weights)} entries, "
                    f"expected {self.n_types}"
                )
            if min(self.type_weights) < 0 or sum(self.type_weights) <= 0:
                raise InvalidArgumentError("type_weights must be non-negative, not all 0")

    @property
    def dim(self) -> int:
        return self.n_types + self.noise_dim + 1

    @classmethod
    def skewed(cls, seed: int = 42, n_types: int = 8, ratio: float = 0.6, **kwargs):
        """Geometric type frequencies: type t has weight ratio**t."""
        weights = tuple(ratio**t for t in range(n_types))
        return cls(seed=seed, n_types=n_types, type_weights=weights, **kwargs)

    def _sample(self, stream: int) -> Matrix:
        rng = make_rng(spawn_seed(self.seed, stream))
        if self.round_robin_types:
            types = np.arange(self.tokens_per_step) % self.n_types
        elif self.type_weights is None:
            types = rng.integers(0, self.n_types, size=self.tokens_per_step)
        else:
            p = np.asarray(self.type_weights, dtype=np.float64)
            types = rng.choice(self.n_types, size=self.tokens_per_step, p=p / p.sum())
        embeddings = np.zeros((self.tokens_per_step, self.dim))
        embeddings[np.arange(self.tokens_per_step), types] = 1.0
        embeddings[:, self.n_types : self.n_types + self.noise_dim] = (
            self.noise_scale * rng.standard_normal((self.tokens_per_step, self.noise_dim))
        )
        embeddings[:, -1] = 1.0
        return embeddings

    def batch(self, step: int) -> Matrix:
        return self._sample(step)

    def held_out(self, index: int = 0) -> Matrix:
        return self._sample(2**40 + index)


def init_gate_weights(
    topology: ExpertTopology,
    source: TokenSource,
    init: GateInit,
    strength: float = 4.0,
    adversarial_logit: float = 6.0,
) -> Matrix:
    rng = make_rng(spawn_seed(source.seed, 2**41))
    if init is GateInit.UNIFORM:
        weights = np.zeros((source.dim, topology.n_experts))
        for t in range(source.n_types):
            weights[t, t % topology.n_experts] = strength
        return weights

    weights = rng.normal(0.0, 1.0 / np.sqrt(source.dim), size=(source.dim, topology.n_experts))
    if init is GateInit.ADVERSARIAL:
        weights *= 0.1
        weights[-1, 0] += adversarial_logit
    return weights


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    loss: float
    max_f: float
    min_f: float

    @property
    def spread(self) -> float:
        return self.max_f - self.min_f


@dataclass
class GateTrainingResult:
    trajectory: list[TrajectoryPoint]
    weights: Matrix = field(repr=False)

    @property
    def final(self) -> TrajectoryPoint:
        return self.trajectory[-1]


def train_gate(
    topology: ExpertTopology,
    coeffs: LossCoefficients,
    token_source: TokenSource,
    steps: int,
    lr: float = 100.0,
    init: GateInit = GateInit.ADVERSARIAL,
    log_every: int = 250,
) -> GateTrainingResult:
    """
    Plain gradient descent on the gate weights using only the auxiliary losses.

    Each step draws a fresh batch from `token_source`, records the loss and the
    spread of the global token fractions, then applies the update.
    """
    if steps < 1:
        raise InvalidArgumentError(f"steps must be >= 1, got {steps}")
    if not lr > 0:
        raise InvalidArgumentError(f"lr must be > 0, got {lr}")

    weights = init_gate_weights(topology, token_source, init)
    trajectory: list[TrajectoryPoint] = []
    for step in range(steps):
        embeddings = token_source.batch(step)
        logits = embeddings @ weights
        if not np.all(np.isfinite(logits)):
            raise NumericError(f"Gate logits diverged at step {step}", step=step)
        output = gate_from_logits(logits, topology.top_k)
        loss, grad_logits = combined_aux_loss(output, topology, coeffs)
        if not np.isfinite(loss):
            raise NumericError(f"Auxiliary loss diverged at step {step}", step=step)

        f = np.bincount(output.assignment, minlength=topology.n_experts) / output.batch_size
        trajectory.append(TrajectoryPoint(step, loss, float(f.max()), float(f.min())))
        if log_every and step % log_every == 0:
            logger.debug(
                "step %d loss %.6e f spread %.4f", step, loss, f.max() - f.min()
            )

        weights = weights - lr * (embeddings.T @ grad_logits)

    logger.info(
        "gate training finished after %d steps, f spread %.4f",
        steps,
        trajectory[-1].spread,
    )
    return GateTrainingResult(trajectory=trajectory, weights=weights)
