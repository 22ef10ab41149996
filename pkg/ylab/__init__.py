from ylab.numkit import (
    make_rng,
    spawn_seed,
    softmax,
    log_softmax,
    softmax_rows,
    topk,
    grad_check,
)
from ylab.router import (
    Scope,
    ExpertTopology,
    LossCoefficients,
    GateOutput,
    BalanceStats,
    FfnConfig,
    GateInit,
    TokenSource,
    gate,
    balance_stats,
    loss_st,
    loss_ep,
    loss_pep,
    combined_aux_loss,
    segment,
    train_gate,
)
from ylab.dispatch import DispatchPlan, ImbalanceReport, dispatch, imbalance, compare_regimes
from ylab.attention import (
    AttentionKind,
    LayerPattern,
    RopeConfig,
    CacheLayout,
    memory_account,
    rope_apply,
    attend_full,
    attend_sliding,
)
from ylab.kvcache import ToyTransformer, KvCache, decode_step
from ylab.packing import PackPolicy, PackedBatch, SampleSpan, pack, bca_mask, reweight
from ylab.preference import (
    Branch,
    PreferencePair,
    LogProbCache,
    DpoConfig,
    bt_loss,
    dpo_loss,
    build_logp_cache,
    score_pair_shared_prefix,
    sample_and_pair,
)
from ylab.cachefile import read_cache, write_cache
from ylab.exceptions import (
    YlabError,
    InvalidArgumentError,
    NumericError,
    CacheStateError,
    UsageError,
    AcceptanceFailure,
)

__all__ = [
    "make_rng",
    "spawn_seed",
    "softmax",
    "log_softmax",
    "softmax_rows",
    "topk",
    "grad_check",
    "Scope",
    "ExpertTopology",
    "LossCoefficients",
    "GateOutput",
    "BalanceStats",
    "FfnConfig",
    "GateInit",
    "TokenSource",
    "gate",
    "balance_stats",
    "loss_st",
    "loss_ep",
    "loss_pep",
    "combined_aux_loss",
    "segment",
    "train_gate",
    "DispatchPlan",
    "ImbalanceReport",
    "dispatch",
    "imbalance",
    "compare_regimes",
    "AttentionKind",
    "LayerPattern",
    "RopeConfig",
    "CacheLayout",
    "memory_account",
    "rope_apply",
    "attend_full",
    "attend_sliding",
    "ToyTransformer",
    "KvCache",
    "decode_step",
    "PackPolicy",
    "PackedBatch",
    "SampleSpan",
    "pack",
    "bca_mask",
    "reweight",
    "Branch",
    "PreferencePair",
    "LogProbCache",
    "DpoConfig",
    "bt_loss",
    "dpo_loss",
    "build_logp_cache",
    "score_pair_shared_prefix",
    "sample_and_pair",
    "read_cache",
    "write_cache",
    "YlabError",
    "InvalidArgumentError",
    "NumericError",
    "CacheStateError",
    "UsageError",
    "AcceptanceFailure",
]
