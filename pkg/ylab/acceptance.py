import logging
import tempfile
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.table import Table

from ylab.attention import LayerPattern, memory_account
from ylab.dispatch import compare_regimes
from ylab.kvcache import KvCache, ToyTransformer, decode_check
from ylab.numkit import grad_check, make_rng, spawn_seed
from ylab.packing import pack, packed_loss_check, sample_weight_fractions
from ylab.preference import (
    DpoConfig,
    PreferencePair,
    bt_loss,
    build_logp_cache,
    dpo_loss,
    score_pair_shared_prefix,
    sequence_logprob,
    train_dpo,
)
from ylab.router import (
    DEFAULT_COEFFICIENTS,
    GLOBAL_BALANCE_COEFFICIENTS,
    ZERO_COEFFICIENTS,
    ExpertTopology,
    FfnConfig,
    LossCoefficients,
    TokenSource,
    balance_grid_minimum,
    combined_aux_loss,
    frozen_aux_loss,
    gate_from_logits,
    segment,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-6
UNIT_COEFFICIENTS = LossCoefficients(1.0, 1.0, 1.0)
GLOBAL_ONLY_UNIT = LossCoefficients(1.0, 0.0, 0.0)
CONVERGENCE_LR = 30.0
PATTERN_VARIANTS = (("full", True), ("full", False), ("3:1", True), ("3:1", False))


def aux_loss_gradcheck(seed: int, instances: int = 20) -> float:
    """
    Max relative error of the combined auxiliary-loss gradient w.r.t. the
    gate logits, with assignments frozen.

    Each instance routes pairs of tokens to experts 0, 2, 4 and 6 so every
    scope is populated and no gradient entry sits near zero.
    """
    topology = ExpertTopology.build(2, 2, 2, top_k=1)
    dominant = np.repeat(np.arange(0, topology.n_experts, 2), 2)
    rows = np.arange(dominant.size)
    worst = 0.0
    for index in range(instances):
        rng = make_rng(spawn_seed(seed, index))
        logits = 0.3 * rng.standard_normal((dominant.size, topology.n_experts))
        logits[rows, dominant] += 3.0
        output = gate_from_logits(logits, topology.top_k)
        _, grad = combined_aux_loss(output, topology, UNIT_COEFFICIENTS)
        error = grad_check(
            lambda x: frozen_aux_loss(x, output.assignment, topology, UNIT_COEFFICIENTS),
            grad,
            logits,
        )
        worst = max(worst, error)
    return worst


def dpo_gradcheck(seed: int, instances: int = 20) -> float:
    """Max relative error of the DPO loss gradient w.r.t. the policy log-probabilities."""
    worst = 0.0
    for index in range(instances):
        rng = make_rng(spawn_seed(seed, index))
        policy = rng.normal(-5.0, 1.0, size=2)
        reference = tuple(rng.normal(-5.0, 1.0, size=2))
        config = DpoConfig(beta=float(rng.uniform(0.05, 1.0)))
        result = dpo_loss(policy, reference, config)
        error = grad_check(
            lambda x: dpo_loss(x, reference, config).loss,
            [result.grad_chosen, result.grad_rejected],
            policy,
        )
        worst = max(worst, error)
    return worst


def bt_gradcheck(seed: int, instances: int = 20) -> float:
    """Max relative error of the Bradley-Terry gradient w.r.t. both rewards."""
    worst = 0.0
    for index in range(instances):
        rng = make_rng(spawn_seed(seed, index))
        rewards = rng.normal(0.0, 2.0, size=2)
        result = bt_loss(*rewards)
        error = grad_check(
            lambda x: bt_loss(x[0], x[1]).loss,
            [result.grad_chosen, result.grad_rejected],
            rewards,
        )
        worst = max(worst, error)
    return worst


GRADIENT_CHECKS: dict[str, Callable[[int, int], float]] = {
    "aux_loss": aux_loss_gradcheck,
    "dpo": dpo_gradcheck,
    "bt": bt_gradcheck,
}


def random_pairs(
    rng: np.random.Generator,
    count: int,
    vocab_size: int,
    prompt_len: int | None = None,
    response_len: tuple[int, int] = (2, 6),
) -> list[PreferencePair]:
    """Seeded pairs with distinct chosen and rejected responses."""
    pairs = []
    while len(pairs) < count:
        length = prompt_len if prompt_len is not None else int(rng.integers(1, 8))
        prompt = rng.integers(0, vocab_size, size=length)
        chosen = rng.integers(0, vocab_size, size=int(rng.integers(*response_len)))
        rejected = rng.integers(0, vocab_size, size=int(rng.integers(*response_len)))
        if tuple(chosen) != tuple(rejected):
            pairs.append(PreferencePair(prompt, chosen, rejected))
    return pairs


def random_samples(rng: np.random.Generator, count: int, vocab_size: int, lengths=(2, 12)):
    return [
        rng.integers(0, vocab_size, size=int(rng.integers(lengths[0], lengths[1] + 1))).tolist()
        for _ in range(count)
    ]


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def row(self) -> dict:
        return {
            "criterion": self.number,
            "name": self.name,
            "passed": int(self.passed),
            "detail": self.detail,
        }


def check_kv_reduction(seed: int) -> CriterionResult:
    pattern = LayerPattern.parse("3:1", window=4096, share_full_kv=True)
    n_layers, context, n_heads, head_dim = 32, 65536, 8, 128
    layout = memory_account(pattern, n_layers, context, n_heads, head_dim)

    cache = KvCache.for_pattern(pattern, n_layers, n_heads, head_dim)
    row = np.zeros((n_heads, head_dim))
    for buffer in cache.buffers.values():
        for position in range(context):
            buffer.write(position, row, row)
    walked = cache.stored_bytes()

    # 82.8125% saved: the cache keeps 22/128 of the baseline
    exact = layout.total_bytes * 128 == layout.baseline_bytes * 22
    passed = exact and walked == layout.total_bytes
    return CriterionResult(
        1, "kv memory reduction", passed,
        f"reduction {layout.reduction_pct!r}% walked {walked} closed {layout.total_bytes}",
    )


def check_half_cache(seed: int) -> CriterionResult:
    layout = memory_account(LayerPattern.parse("full", share_full_kv=True), 32, 65536)
    return CriterionResult(
        2, "shared full layers halve cache", layout.total_bytes * 2 == layout.baseline_bytes,
        f"reduction {layout.reduction_pct!r}%",
    )


def check_loss_minimum(seed: int) -> CriterionResult:
    cases = [
        (ExpertTopology.build(1, 1, n_experts), coeffs)
        for n_experts in (2, 3, 4)
        for coeffs in (DEFAULT_COEFFICIENTS, UNIT_COEFFICIENTS)
    ]
    cases += [
        (ExpertTopology.build(*shape), GLOBAL_ONLY_UNIT)
        for shape in ((2, 1, 2), (2, 2, 1), (1, 2, 2))
    ]
    failures = []
    for topology, coeffs in cases:
        grid = balance_grid_minimum(topology, coeffs, step=0.05)
        n_experts = topology.n_experts
        passed = grid.minimum >= grid.uniform_value * (1.0 - 1e-9)
        # 20 grid divisions at step 0.05
        if 20 % n_experts == 0:
            passed &= grid.argmin == (1.0 / n_experts,) * n_experts
            passed &= grid.at_or_below_uniform == 1
        if not passed:
            failures.append(f"{topology.n_groups}x{topology.partitions_per_group}"
                            f"x{topology.experts_per_partition} {coeffs}")
    detail = f"uniform is minimal in {len(cases)} cases" if not failures else ", ".join(failures)
    return CriterionResult(3, "balance loss minimum at uniform", not failures, detail)


def check_gradients(seed: int) -> CriterionResult:
    errors = {name: check(seed, 20) for name, check in GRADIENT_CHECKS.items()}
    passed = all(error < GRADIENT_TOLERANCE for error in errors.values())
    detail = " ".join(f"{name}={error:.2e}" for name, error in errors.items())
    return CriterionResult(4, "analytic gradients", passed, detail)


def check_balance_convergence(seed: int, jobs: int = 1) -> CriterionResult:
    """
    Train from a collapsed gate with the global term alone and compare against
    the scoped defaults and an unbalanced control on one held-out batch.
    """
    topology = ExpertTopology.build(2, 2, 2, top_k=1)
    source = TokenSource(seed=seed, n_types=topology.n_experts, tokens_per_step=512)
    balanced, scoped, control = compare_regimes(
        source,
        topology,
        [GLOBAL_BALANCE_COEFFICIENTS, DEFAULT_COEFFICIENTS, ZERO_COEFFICIENTS],
        steps=2000,
        lr=CONVERGENCE_LR,
        jobs=jobs,
    )
    passed = (
        balanced.final_spread < 0.1
        and balanced.partition.imbalance_ratio <= control.partition.imbalance_ratio
    )
    detail = (
        f"spread {balanced.final_spread:.4f} (scoped {scoped.final_spread:.4f}) "
        f"partition ratio {balanced.partition.imbalance_ratio:.4f} "
        f"vs control {control.partition.imbalance_ratio:.4f}"
    )
    return CriterionResult(5, "balance convergence", passed, detail)


def check_segmentation(seed: int) -> CriterionResult:
    checked = 0
    passed = True
    for index in range(10):
        rng = make_rng(spawn_seed(seed, index))
        n_experts = int(rng.integers(1, 33))
        base = FfnConfig(
            n_experts=n_experts,
            hidden=8 * int(rng.integers(1, 257)),
            top_k=int(rng.integers(1, n_experts + 1)),
            d_model=int(rng.integers(16, 4097)),
        )
        for m in (1, 2, 4, 8):
            segmented = segment(base, m).segmented
            checked += 1
            passed &= segmented.total_params == base.total_params
            passed &= segmented.activated_params == base.activated_params
    return CriterionResult(6, "segmentation conserves parameters", bool(passed),
                           f"{checked} configurations")


def check_packed_loss(seed: int) -> CriterionResult:
    worst_bca, worst_plain = 0.0, 0.0
    for index in range(20):
        child = spawn_seed(seed, index)
        rng = make_rng(child)
        model = ToyTransformer.random(child, LayerPattern.parse("3:1", window=4))
        samples = random_samples(rng, int(rng.integers(3, 6)), model.vocab_size)
        packed, isolated = packed_loss_check(model, samples, capacity=32, use_bca=True)
        worst_bca = max(worst_bca, float(np.max(np.abs(np.subtract(packed, isolated)))))
        packed, isolated = packed_loss_check(model, samples, capacity=32, use_bca=False)
        worst_plain = max(worst_plain, float(np.max(np.abs(np.subtract(packed, isolated)))))
    passed = worst_bca <= 1e-9 and worst_plain > 1e-6
    return CriterionResult(
        7, "packed loss matches isolated runs", passed,
        f"bca diff {worst_bca:.2e} without bca {worst_plain:.2e}",
    )


def check_reweighting(seed: int) -> CriterionResult:
    passed = True
    for index in range(50):
        rng = make_rng(spawn_seed(seed, index))
        lengths = [2, 200] + rng.integers(2, 201, size=int(rng.integers(1, 10))).tolist()
        samples = [[1] * length for length in lengths]
        batch = pack(samples, capacity=256)
        target = Fraction(1, batch.sample_count)
        for spans in batch.spans:
            fractions = sample_weight_fractions(spans, batch.sample_count)
            for span in spans:
                passed &= fractions[span.sample_id] * span.loss_token_count == target
    return CriterionResult(8, "sample reweighting is exact", bool(passed), "50 batches")


def check_decode_oracle(seed: int) -> CriterionResult:
    seeds = [spawn_seed(seed, index) for index in range(5)]
    results = decode_check(seeds=seeds, n_tokens=32)
    worst = max(result.max_abs_diff for result in results)
    passed = all(result.passed for result in results)
    return CriterionResult(9, "incremental decode matches forward", passed,
                           f"{len(results)} runs max diff {worst:.2e}")


def check_dpo_equivalence(seed: int) -> CriterionResult:
    rng = make_rng(seed)
    model = ToyTransformer.random(seed, LayerPattern.parse("3:1", window=4))
    pairs = random_pairs(rng, 8, model.vocab_size)
    cache = build_logp_cache(model, pairs)
    cached = train_dpo(model, pairs, DpoConfig(), steps=5, lr=0.5, reference=cache)
    live = train_dpo(model, pairs, DpoConfig(), steps=5, lr=0.5, reference=model)
    trajectory_diff = max(
        abs(a.loss - b.loss) for a, b in zip(cached.trajectory, live.trajectory)
    )

    prefix_diff, savings_ok = 0.0, True
    for variant, (text, share) in enumerate(PATTERN_VARIANTS):
        scorer = ToyTransformer.random(
            spawn_seed(seed, variant), LayerPattern.parse(text, window=4, share_full_kv=share)
        )
        for prompt_len in (0, 1, 7, 24):
            pair = random_pairs(rng, 1, scorer.vocab_size, prompt_len=prompt_len)[0]
            score = score_pair_shared_prefix(scorer, pair)
            prefix_diff = max(
                prefix_diff,
                abs(score.chosen_logp - sequence_logprob(scorer, pair.prompt, pair.chosen)),
                abs(score.rejected_logp - sequence_logprob(scorer, pair.prompt, pair.rejected)),
            )
            savings_ok &= score.recompute_savings == prompt_len

    passed = trajectory_diff <= 1e-10 and prefix_diff <= 1e-9 and savings_ok
    return CriterionResult(
        10, "dpo cache and shared prefix", passed,
        f"trajectory diff {trajectory_diff:.2e} prefix diff {prefix_diff:.2e}",
    )


def _write_inputs(directory: Path, seed: int) -> tuple[Path, Path]:
    rng = make_rng(seed)
    tokens = directory / "tokens.txt"
    tokens.write_text(
        "".join(" ".join(map(str, s)) + "\n" for s in random_samples(rng, 12, 32, (2, 40)))
    )
    pairs = directory / "pairs.jsonl"
    pairs.write_text(
        "".join(
            f'{{"prompt": {list(p.prompt)}, "chosen": {list(p.chosen)}, '
            f'"rejected": {list(p.rejected)}}}\n'
            for p in random_pairs(rng, 6, 32)
        )
    )
    return tokens, pairs


def determinism_commands(tokens: Path, pairs: Path) -> list[list[str]]:
    return [
        ["route-balance", "--router.steps", "50", "--router.every", "10"],
        ["dispatch-sim", "--router.steps", "50"],
        ["kv-memory"],
        ["decode-check", "--decode.seeds", "2"],
        ["pack", "--pack.input", str(tokens)],
        ["dpo-step", "--dpo.input", str(pairs)],
        ["dpo-cache", "--dpo.input", str(pairs)],
        ["gradcheck", "--gradcheck.instances", "3"],
    ]


def check_determinism(seed: int, runner: Callable[[Sequence[str]], int]) -> CriterionResult:
    """Run every other subcommand twice with the same seed and compare output bytes."""
    differing = []
    with tempfile.TemporaryDirectory() as name:
        directory = Path(name)
        tokens, pairs = _write_inputs(directory, seed)
        for command in determinism_commands(tokens, pairs):
            outputs = []
            for attempt in range(2):
                output = directory / f"{command[0]}-{attempt}.out"
                runner(command + ["--seed", str(seed), "--output", str(output)])
                outputs.append(output.read_bytes() if output.exists() else None)
            if outputs[0] is None or outputs[0] != outputs[1]:
                differing.append(command[0])
    detail = "all outputs identical" if not differing else "differs: " + ", ".join(differing)
    return CriterionResult(11, "deterministic outputs", not differing, detail)


def run_acceptance(
    seed: int,
    runner: Callable[[Sequence[str]], int] | None = None,
    jobs: int = 1,
) -> list[CriterionResult]:
    """Every acceptance criterion in order. Determinism needs a CLI `runner`."""
    checks = [
        check_kv_reduction,
        check_half_cache,
        check_loss_minimum,
        check_gradients,
        lambda s: check_balance_convergence(s, jobs),
        check_segmentation,
        check_packed_loss,
        check_reweighting,
        check_decode_oracle,
        check_dpo_equivalence,
    ]
    results = []
    for check in checks:
        result = check(seed)
        logger.info("criterion %d %s: %s", result.number, result.name, result.passed)
        results.append(result)
    if runner is not None:
        results.append(check_determinism(seed, runner))
    return results


def print_summary(results: list[CriterionResult], console: Console | None = None) -> None:
    console = console or Console(stderr=True)
    table = Table(title="Acceptance", show_header=True, header_style="bold magenta")
    table.add_column("#", justify="right")
    table.add_column("Criterion")
    table.add_column("Result")
    table.add_column("Detail")
    for result in results:
        verdict = "[green]PASS[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(str(result.number), result.name, verdict, result.detail)
    console.print(table)
