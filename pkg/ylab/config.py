import argparse
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ylab.exceptions import UsageError

DEFAULT_SEED = 42
SEED_ENV = "YLAB_SEED"
FORMATS = ("csv", "json")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _choice(*options: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return value

    convert.__name__ = "choice"
    return convert


def int_list(text: str) -> tuple[int, ...]:
    """Comma-separated integers, e.g. `4096,8192`."""
    return tuple(int(part) for part in str(text).split(",") if part.strip())


def str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in str(text).split(",") if part.strip())


@dataclass(frozen=True)
class ConfigKey:
    name: str
    default: Any
    type: Callable[[str], Any]
    help: str
    aliases: tuple[str, ...] = ()


_ROUTER_KEYS = (
    ConfigKey("router.alpha_st", 1e-6, float, "global balance loss weight"),
    ConfigKey("router.alpha_ep", 1e-4, float, "expert-parallel group loss weight"),
    ConfigKey("router.alpha_pep", 1e-3, float, "partition loss weight"),
    ConfigKey("router.groups", 2, int, "expert-parallel groups"),
    ConfigKey("router.partitions_per_group", 2, int, "partitions inside each group"),
    ConfigKey("router.experts_per_partition", 2, int, "experts inside each partition"),
    ConfigKey("router.top_k", 1, int, "experts selected per token"),
    ConfigKey("router.steps", 2000, int, "gate training steps"),
    ConfigKey("router.lr", 100.0, float, "gate learning rate"),
    ConfigKey("router.tokens_per_step", 512, int, "tokens per training batch"),
    ConfigKey("router.init", "adversarial", _choice("uniform", "adversarial", "random"),
              "gate initialisation"),
)

_MODEL_KEYS = (
    ConfigKey("model.pattern", "3:1", str, "toy model layer pattern"),
    ConfigKey("model.window", 4, int, "toy model sliding window"),
    ConfigKey("model.layers", 4, int, "toy model layers"),
    ConfigKey("model.vocab", 32, int, "toy model vocabulary size"),
    ConfigKey("model.d_model", 16, int, "toy model width"),
    ConfigKey("model.heads", 2, int, "toy model attention heads"),
    ConfigKey("model.share", "on", _choice("on", "off"), "share full-layer caches"),
)

_DPO_KEYS = (
    ConfigKey("dpo.input", "", str, "line-delimited JSON preference pairs"),
    ConfigKey("dpo.beta", 0.1, float, "DPO temperature"),
)

REGISTRY: dict[str, tuple[ConfigKey, ...]] = {
    "route-balance": _ROUTER_KEYS
    + (ConfigKey("router.every", 100, int, "trajectory row interval"),),
    "dispatch-sim": _ROUTER_KEYS
    + (
        ConfigKey("dispatch.source_ranks", 4, int, "data-parallel source ranks"),
        ConfigKey("dispatch.bytes_per_token", 1, int, "bytes per routed unit"),
    ),
    "kv-memory": (
        ConfigKey("attention.window", "4096", int_list, "sliding windows", ("--window",)),
        ConfigKey("attention.context", "65536", int_list, "context lengths", ("--context",)),
        ConfigKey("attention.pattern", "3:1,full", str_list, "layer patterns", ("--pattern",)),
        ConfigKey("attention.share", "both", _choice("on", "off", "both"), "full-layer cache sharing"),
        ConfigKey("attention.layers", 32, int, "layers in the stack", ("--layers",)),
        ConfigKey("attention.heads", 8, int, "key/value heads"),
        ConfigKey("attention.head_dim", 128, int, "head dimension"),
        ConfigKey("attention.bytes_per_element", 2, int, "bytes per cached element"),
    ),
    "decode-check": (
        ConfigKey("decode.seeds", 5, int, "seeded models per combination"),
        ConfigKey("decode.tokens", 32, int, "tokens decoded per run"),
        ConfigKey("decode.layers", 8, int, "toy model layers"),
        ConfigKey("decode.window", 4, int, "toy model sliding window"),
    ),
    "pack": (
        ConfigKey("pack.input", "", str, "file of whitespace-separated token lines"),
        ConfigKey("pack.capacity", 64, int, "tokens per packed sequence"),
        ConfigKey("pack.policy", "first_fit", _choice("first_fit", "greedy_descending"),
                  "packing order"),
    ),
    "dpo-step": _MODEL_KEYS
    + _DPO_KEYS
    + (
        ConfigKey("dpo.steps", 5, int, "gradient steps on the readout bias"),
        ConfigKey("dpo.lr", 0.5, float, "learning rate"),
    ),
    "dpo-cache": _MODEL_KEYS
    + _DPO_KEYS
    + (ConfigKey("dpo.snapshot", "snapshot-0", str, "dataset snapshot id"),),
    "gradcheck": (
        ConfigKey("gradcheck.instances", 20, int, "seeded instances per gradient"),
        ConfigKey("gradcheck.tolerance", 1e-6, float, "max relative error"),
    ),
    "acceptance": (),
}

SUBCOMMANDS = tuple(REGISTRY)


@dataclass
class RunConfig:
    subcommand: str
    seed: int = DEFAULT_SEED
    overrides: dict[str, Any] = field(default_factory=dict)
    output_path: Path | None = None
    format: str = "csv"
    jobs: int = 1
    log_level: str = "WARNING"

    @property
    def keys(self) -> dict[str, ConfigKey]:
        return {key.name: key for key in REGISTRY[self.subcommand]}

    def get(self, name: str) -> Any:
        keys = self.keys
        if name not in keys:
            raise UsageError(_unknown_key_message(name, self.subcommand))
        if name in self.overrides:
            return self.overrides[name]
        key = keys[name]
        return key.type(key.default) if isinstance(key.default, str) else key.default


def _unknown_key_message(name: str, subcommand: str) -> str:
    valid = ", ".join(key.name for key in REGISTRY[subcommand]) or "(none)"
    return f"Unknown key {name!r} for {subcommand}. Valid keys: seed, {valid}"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ylab",
        description="Desk-scale lab for MoE routing, hybrid attention, packing and DPO",
        allow_abbrev=False,
    )
    subparsers = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    for name, keys in REGISTRY.items():
        sub = subparsers.add_parser(name, help=f"run {name}", allow_abbrev=False)
        sub.add_argument("--seed", type=_seed, default=argparse.SUPPRESS,
                         help=f"random seed (default: ${SEED_ENV} or {DEFAULT_SEED})")
        sub.add_argument("--config", type=Path, default=None, help="flat 'key = value' file")
        sub.add_argument("--output", "-o", type=Path, default=None,
                         help="result file (default: stdout)")
        sub.add_argument("--format", choices=FORMATS, default="csv")
        sub.add_argument("--jobs", type=int, default=1, help="worker threads")
        sub.add_argument("--log-level", choices=LOG_LEVELS, default="WARNING")
        for key in keys:
            sub.add_argument(
                f"--{key.name}",
                *key.aliases,
                dest=key.name,
                type=key.type,
                default=argparse.SUPPRESS,
                metavar=key.name.split(".")[-1].upper(),
                help=f"{key.help} (default: {key.default})",
            )
        if name == "kv-memory":
            sub.add_argument("--share", dest="attention.share", action="store_const",
                             const="on", default=argparse.SUPPRESS, help="sharing on only")
            sub.add_argument("--no-share", dest="attention.share", action="store_const",
                             const="off", default=argparse.SUPPRESS, help="sharing off only")
    return parser


def read_config_file(path: Path, subcommand: str) -> dict[str, Any]:
    """Parse flat `key = value` lines with `#` comments into typed values."""
    keys = {key.name: key for key in REGISTRY[subcommand]}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as error:
        raise UsageError(f"Cannot read config file {path}: {error}")

    values: dict[str, Any] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, separator, text = (part.strip() for part in line.partition("="))
        if not separator or not name or not text:
            raise UsageError(f"{path}:{number}: expected 'key = value', got {raw.strip()!r}")
        if name == "seed":
            convert = _seed
        elif name in keys:
            convert = keys[name].type
        else:
            raise UsageError(f"{path}:{number}: " + _unknown_key_message(name, subcommand))
        try:
            values[name] = convert(text)
        except ValueError as error:
            raise UsageError(f"{path}:{number}: bad value for {name}: {error}")
    return values


def parse_config(argv: Sequence[str], env: Mapping[str, str] | None = None) -> RunConfig:
    """
    Command-line flags override the `--config` file, which overrides
    `YLAB_SEED` (seed only), which overrides registry defaults.
    """
    env = os.environ if env is None else env
    parser = build_parser()
    namespace, extras = parser.parse_known_args(list(argv))
    subcommand = getattr(namespace, "subcommand", None)
    if subcommand is None:
        raise UsageError(f"Missing subcommand. Choose one of: {', '.join(SUBCOMMANDS)}")
    if extras:
        unknown = extras[0].lstrip("-").split("=", 1)[0]
        raise UsageError(_unknown_key_message(unknown, subcommand))
    if namespace.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {namespace.jobs}")

    from_file = read_config_file(namespace.config, subcommand) if namespace.config else {}
    from_flags = {key.name: getattr(namespace, key.name)
                  for key in REGISTRY[subcommand] if hasattr(namespace, key.name)}
    overrides = {name: value for name, value in from_file.items() if name != "seed"}
    overrides.update(from_flags)

    if hasattr(namespace, "seed"):
        seed = namespace.seed
    elif "seed" in from_file:
        seed = from_file["seed"]
    elif env.get(SEED_ENV):
        try:
            seed = _seed(env[SEED_ENV])
        except ValueError as error:
            raise UsageError(f"Bad {SEED_ENV}: {error}")
    else:
        seed = DEFAULT_SEED

    return RunConfig(
        subcommand=subcommand,
        seed=seed,
        overrides=overrides,
        output_path=namespace.output,
        format=namespace.format,
        jobs=namespace.jobs,
        log_level=namespace.log_level,
    )
