import csv
import io
import json
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from rich.console import Console

from ylab.acceptance import GRADIENT_CHECKS, print_summary, run_acceptance
from ylab.attention import LayerPattern, sweep_memory
from ylab.cachefile import write_cache
from ylab.config import RunConfig, parse_config
from ylab.dispatch import compare_regimes
from ylab.exceptions import (
    AcceptanceFailure,
    CacheStateError,
    InvalidArgumentError,
    NumericError,
    UsageError,
)
from ylab.kvcache import ToyTransformer, decode_check
from ylab.numkit import spawn_seed
from ylab.packing import PackPolicy, pack, read_token_lines, sample_weight_fractions
from ylab.preference import DpoConfig, build_logp_cache, read_pairs, train_dpo
from ylab.router import (
    ZERO_COEFFICIENTS,
    ExpertTopology,
    GateInit,
    LossCoefficients,
    TokenSource,
    train_gate,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


@dataclass
class CommandResult:
    """Rows of one subcommand. `ok` is False when a checked property failed."""

    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    ok: bool = True


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _plain(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def render(result: CommandResult, fmt: str) -> str:
    if fmt == "json":
        rows = [{key: _plain(row[key]) for key in result.columns} for row in result.rows]
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(result.columns)
    for row in result.rows:
        writer.writerow([_cell(row[key]) for key in result.columns])
    return buffer.getvalue()


def _topology(config: RunConfig) -> ExpertTopology:
    return ExpertTopology.build(
        config.get("router.groups"),
        config.get("router.partitions_per_group"),
        config.get("router.experts_per_partition"),
        top_k=config.get("router.top_k"),
    )


def _coefficients(config: RunConfig) -> LossCoefficients:
    return LossCoefficients(
        alpha_st=config.get("router.alpha_st"),
        alpha_ep=config.get("router.alpha_ep"),
        alpha_pep=config.get("router.alpha_pep"),
    )


def _token_source(config: RunConfig, topology: ExpertTopology) -> TokenSource:
    return TokenSource(
        seed=config.seed,
        n_types=topology.n_experts,
        tokens_per_step=config.get("router.tokens_per_step"),
    )


def _toy_model(config: RunConfig) -> ToyTransformer:
    pattern = LayerPattern.parse(
        config.get("model.pattern"),
        window=config.get("model.window"),
        share_full_kv=config.get("model.share") == "on",
    )
    return ToyTransformer.random(
        config.seed,
        pattern,
        n_layers=config.get("model.layers"),
        vocab_size=config.get("model.vocab"),
        d_model=config.get("model.d_model"),
        n_heads=config.get("model.heads"),
    )


def _required_input(config: RunConfig, key: str) -> str:
    path = config.get(key)
    if not path:
        raise UsageError(f"{config.subcommand} needs --{key}")
    return path


def route_balance(config: RunConfig) -> CommandResult:
    topology = _topology(config)
    steps = config.get("router.steps")
    every = max(1, config.get("router.every"))
    run = train_gate(
        topology,
        _coefficients(config),
        _token_source(config, topology),
        steps,
        lr=config.get("router.lr"),
        init=GateInit[config.get("router.init").upper()],
    )
    result = CommandResult(["step", "loss", "max_f", "min_f", "spread"])
    for point in run.trajectory:
        if point.step % every == 0 or point.step == steps - 1:
            result.rows.append(
                {
                    "step": point.step,
                    "loss": point.loss,
                    "max_f": point.max_f,
                    "min_f": point.min_f,
                    "spread": point.spread,
                }
            )
    return result


def dispatch_sim(config: RunConfig) -> CommandResult:
    topology = _topology(config)
    coeffs = _coefficients(config)
    variants = [
        coeffs,
        LossCoefficients(coeffs.alpha_st, coeffs.alpha_ep, 0.0),
        LossCoefficients(coeffs.alpha_st, 0.0, 0.0),
        ZERO_COEFFICIENTS,
    ]
    regimes = compare_regimes(
        _token_source(config, topology),
        topology,
        variants,
        steps=config.get("router.steps"),
        lr=config.get("router.lr"),
        init=GateInit[config.get("router.init").upper()],
        source_ranks=config.get("dispatch.source_ranks"),
        jobs=config.jobs,
    )
    result = CommandResult(
        ["variant", "scope", "max_load", "mean_load", "stddev", "imbalance_ratio"]
    )
    for regime in regimes:
        for report in (regime.group, regime.partition):
            result.rows.append({"variant": regime.variant, **report.row()})
    return result


def kv_memory(config: RunConfig) -> CommandResult:
    sharing = {"on": (True,), "off": (False,), "both": (True, False)}[
        config.get("attention.share")
    ]
    rows = sweep_memory(
        windows=config.get("attention.window"),
        contexts=config.get("attention.context"),
        patterns=config.get("attention.pattern"),
        sharing=sharing,
        jobs=config.jobs,
        n_layers=config.get("attention.layers"),
        n_heads=config.get("attention.heads"),
        head_dim=config.get("attention.head_dim"),
        bytes_per_element=config.get("attention.bytes_per_element"),
    )
    return CommandResult(list(rows[0]) if rows else [], rows)


def decode_check_command(config: RunConfig) -> CommandResult:
    seeds = [spawn_seed(config.seed, index) for index in range(config.get("decode.seeds"))]
    results = decode_check(
        seeds=seeds,
        n_tokens=config.get("decode.tokens"),
        n_layers=config.get("decode.layers"),
        window=config.get("decode.window"),
    )
    columns = ["pattern", "share", "seed", "max_abs_diff", "cache_bytes",
               "closed_form_bytes", "passed"]
    rows = [
        {
            "pattern": r.pattern,
            "share": r.share,
            "seed": r.seed,
            "max_abs_diff": r.max_abs_diff,
            "cache_bytes": r.cache_bytes,
            "closed_form_bytes": r.closed_form_bytes,
            "passed": r.passed,
        }
        for r in results
    ]
    return CommandResult(columns, rows, ok=all(r.passed for r in results))


def pack_command(config: RunConfig) -> CommandResult:
    samples = read_token_lines(_required_input(config, "pack.input"))
    batch = pack(
        samples,
        config.get("pack.capacity"),
        PackPolicy[config.get("pack.policy").upper()],
    )
    result = CommandResult(["sequence", "sample_id", "start", "length", "weight"])
    for index, spans in enumerate(batch.spans):
        fractions = sample_weight_fractions(spans, batch.sample_count)
        for span in spans:
            result.rows.append(
                {
                    "sequence": index,
                    "sample_id": span.sample_id,
                    "start": span.start,
                    "length": span.length,
                    "weight": float(fractions[span.sample_id]),
                }
            )
    Console(stderr=True).print(
        f"{batch.sample_count} samples in {len(batch.sequences)} sequences, "
        f"capacity utilization {100.0 * batch.utilization:.2f}%"
    )
    return result


def dpo_step(config: RunConfig) -> CommandResult:
    pairs = read_pairs(_required_input(config, "dpo.input"))
    model = _toy_model(config)
    cache = build_logp_cache(model, pairs, snapshot_id="dpo-step")
    run = train_dpo(
        model,
        pairs,
        DpoConfig(beta=config.get("dpo.beta")),
        steps=config.get("dpo.steps"),
        lr=config.get("dpo.lr"),
        reference=cache,
    )
    rows = [{"step": s.step, "loss": s.loss, "margin": s.mean_margin} for s in run.trajectory]
    return CommandResult(["step", "loss", "margin"], rows)


def dpo_cache(config: RunConfig) -> None:
    if config.output_path is None:
        raise UsageError("dpo-cache writes a binary file and needs --output")
    pairs = read_pairs(_required_input(config, "dpo.input"))
    cache = build_logp_cache(_toy_model(config), pairs, config.get("dpo.snapshot"))
    write_cache(cache, config.output_path)
    Console(stderr=True).print(f"wrote {len(cache)} records to {config.output_path}")


def gradcheck(config: RunConfig) -> CommandResult:
    instances = config.get("gradcheck.instances")
    tolerance = config.get("gradcheck.tolerance")
    result = CommandResult(["check", "instances", "max_rel_error", "passed"])
    for name, check in GRADIENT_CHECKS.items():
        error = check(config.seed, instances)
        result.rows.append(
            {"check": name, "instances": instances, "max_rel_error": error,
             "passed": error < tolerance}
        )
    result.ok = all(row["passed"] for row in result.rows)
    return result


def acceptance(config: RunConfig) -> CommandResult:
    results = run_acceptance(config.seed, runner=_subrunner(config), jobs=config.jobs)
    print_summary(results)
    rows = [r.row() for r in results]
    return CommandResult(["criterion", "name", "passed", "detail"], rows,
                         ok=all(r.passed for r in results))


def _subrunner(parent: RunConfig) -> Callable[[Sequence[str]], int]:
    def runner(argv: Sequence[str]) -> int:
        return run(parse_config(list(argv) + ["--log-level", parent.log_level]))

    return runner


COMMANDS: dict[str, Callable[[RunConfig], CommandResult | None]] = {
    "route-balance": route_balance,
    "dispatch-sim": dispatch_sim,
    "kv-memory": kv_memory,
    "decode-check": decode_check_command,
    "pack": pack_command,
    "dpo-step": dpo_step,
    "dpo-cache": dpo_cache,
    "gradcheck": gradcheck,
    "acceptance": acceptance,
}


def emit(result: CommandResult, config: RunConfig) -> None:
    text = render(result, config.format)
    if config.output_path is None:
        sys.stdout.write(text)
    else:
        config.output_path.write_text(text)


def run(config: RunConfig) -> int:
    """Dispatch one parsed command. Exit code 0 on success, 1 on a failed check, 2 on bad usage."""
    try:
        result = COMMANDS[config.subcommand](config)
        if result is not None:
            emit(result, config)
            if not result.ok:
                raise AcceptanceFailure(f"{config.subcommand}: a checked property failed")
    except UsageError as error:
        print(f"ylab: {error}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, OSError) as error:
        print(f"ylab {config.subcommand}: {error}", file=sys.stderr)
        return 2
    except (AcceptanceFailure, NumericError, CacheStateError) as error:
        print(f"ylab {config.subcommand}: {error}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        config = parse_config(argv)
    except UsageError as error:
        print(f"ylab: {error}", file=sys.stderr)
        return 2
    logging.basicConfig(level=config.log_level, format=LOG_FORMAT, stream=sys.stderr)
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
