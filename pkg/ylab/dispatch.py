import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ylab.exceptions import InvalidArgumentError
from ylab.router import (
    ExpertTopology,
    GateInit,
    GateOutput,
    LossCoefficients,
    Scope,
    TokenSource,
    gate,
    train_gate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Message:
    source_rank: int
    destination_group: int
    tokens: int


@dataclass(frozen=True)
class DispatchPlan:
    """
    Routed-unit counts for one All-to-All dispatch.

    Every (token, selected expert) pair is one routed unit, so the plan moves
    `batch_size * top_k` units in total. Bytes are derived by multiplying with
    `bytes_per_token`.
    """

    topology: ExpertTopology
    per_expert_tokens: np.ndarray
    per_group_tokens: np.ndarray
    per_partition_tokens: np.ndarray
    messages: tuple[Message, ...]
    bytes_per_token: int = 1

    @property
    def total_units(self) -> int:
        return int(self.per_expert_tokens.sum())

    @property
    def communication_bytes(self) -> int:
        return self.total_units * self.bytes_per_token

    def loads(self, scope: Scope) -> np.ndarray:
        return {
            Scope.GLOBAL: self.per_expert_tokens,
            Scope.GROUP: self.per_group_tokens,
            Scope.PARTITION: self.per_partition_tokens,
        }[scope]


def dispatch(
    gate_output: GateOutput,
    topology: ExpertTopology,
    source_ranks: int = 1,
    bytes_per_token: int = 1,
) -> DispatchPlan:
    """Turn a gate's top-k selections into per-scope loads and rank-to-group messages."""
    if source_ranks < 1:
        raise InvalidArgumentError(f"source_ranks must be >= 1, got {source_ranks}")
    if gate_output.n_experts != topology.n_experts:
        raise InvalidArgumentError(
            f"Gate has {gate_output.n_experts} experts, topology has {topology.n_experts}"
        )

    selected = gate_output.selected
    per_expert = np.bincount(selected.ravel(), minlength=topology.n_experts)
    per_partition = per_expert.reshape(topology.n_partitions, -1).sum(axis=1)
    per_group = per_partition.reshape(topology.n_groups, -1).sum(axis=1)

    # tokens go to source ranks round-robin
    ranks = np.arange(gate_output.batch_size) % source_ranks
    groups = topology.group_of(selected)
    traffic = np.zeros((source_ranks, topology.n_groups), dtype=np.int64)
    np.add.at(traffic, (np.repeat(ranks, selected.shape[1]), groups.ravel()), 1)
    messages = tuple(
        Message(rank, group, int(traffic[rank, group]))
        for rank in range(source_ranks)
        for group in range(topology.n_groups)
        if traffic[rank, group] > 0
    )
    return DispatchPlan(
        topology=topology,
        per_expert_tokens=per_expert,
        per_group_tokens=per_group,
        per_partition_tokens=per_partition,
        messages=messages,
        bytes_per_token=bytes_per_token,
    )


@dataclass(frozen=True)
class ImbalanceReport:
    scope: Scope
    max_load: int
    mean_load: float
    stddev: float
    imbalance_ratio: float

    def row(self) -> dict:
        return {
            "scope": self.scope.name.lower(),
            "max_load": self.max_load,
            "mean_load": self.mean_load,
            "stddev": self.stddev,
            "imbalance_ratio": self.imbalance_ratio,
        }


def imbalance(plan: DispatchPlan, scope: Scope) -> ImbalanceReport:
    """Max, mean, population stddev and max/mean of the scope's load vector."""
    loads = plan.loads(scope).astype(np.float64)
    mean = float(loads.mean())
    ratio = float(loads.max() / mean) if mean > 0 else 1.0
    return ImbalanceReport(
        scope=scope,
        max_load=int(loads.max()),
        mean_load=mean,
        stddev=float(loads.std()),
        imbalance_ratio=ratio,
    )


@dataclass(frozen=True)
class RegimeResult:
    variant: int
    coeffs: LossCoefficients
    final_spread: float
    group: ImbalanceReport
    partition: ImbalanceReport


def _run_regime(
    index: int,
    coeffs: LossCoefficients,
    token_source: TokenSource,
    topology: ExpertTopology,
    steps: int,
    lr: float,
    init: GateInit,
    source_ranks: int,
) -> RegimeResult:
    run = train_gate(topology, coeffs, token_source, steps, lr=lr, init=init)
    held_out = gate(token_source.held_out(), run.weights, topology.top_k)
    plan = dispatch(held_out, topology, source_ranks)
    logger.info("variant %d: %s", index, coeffs)
    return RegimeResult(
        variant=index,
        coeffs=coeffs,
        final_spread=run.final.spread,
        group=imbalance(plan, Scope.GROUP),
        partition=imbalance(plan, Scope.PARTITION),
    )


def compare_regimes(
    token_source: TokenSource,
    topology: ExpertTopology,
    coeffs_variants: list[LossCoefficients],
    steps: int,
    lr: float = 100.0,
    init: GateInit = GateInit.ADVERSARIAL,
    source_ranks: int = 4,
    jobs: int = 1,
) -> list[RegimeResult]:
    """
    Train one gate per coefficient variant from the same seed, then dispatch a
    shared held-out batch through each. Rows come back in variant order.
    """
    if not coeffs_variants:
        raise InvalidArgumentError("At least one coefficient variant is required")
    arguments = [
        (index, coeffs, token_source, topology, steps, lr, init, source_ranks)
        for index, coeffs in enumerate(coeffs_variants)
    ]
    if jobs <= 1:
        return [_run_regime(*args) for args in arguments]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_regime, *args) for args in arguments]
        return [future.result() for future in futures]
