import json
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType

import numpy as np

from ylab.exceptions import CacheStateError, InvalidArgumentError, NumericError
from ylab.kvcache import KvCache, ToyTransformer, decode_step, prefill
from ylab.numkit import (
    log_sigmoid,
    log_softmax,
    log_softmax_rows,
    make_rng,
    sigmoid,
    softmax,
    spawn_seed,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURES = (0.7, 1.0, 1.3)


class Branch(Enum):
    """Which response of a preference pair. Values are the on-disk codes."""

    CHOSEN = 0
    REJECTED = 1


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if not self.chosen or not self.rejected:
            raise InvalidArgumentError("Chosen and rejected responses must be non-empty")
        if self.chosen == self.rejected:
            raise InvalidArgumentError("Chosen and rejected responses must differ")

    def response(self, branch: Branch) -> tuple[int, ...]:
        return self.chosen if branch is Branch.CHOSEN else self.rejected


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidArgumentError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class BtResult:
    loss: float
    grad_chosen: float
    grad_rejected: float


def bt_loss(reward_chosen: float, reward_rejected: float) -> BtResult:
    """Bradley-Terry loss -log sigmoid(r_chosen - r_rejected) and its gradients."""
    delta = float(reward_chosen) - float(reward_rejected)
    if not np.isfinite(delta):
        raise NumericError("Bradley-Terry rewards must be finite")
    grad = -float(sigmoid(-delta))
    return BtResult(loss=-float(log_sigmoid(delta)), grad_chosen=grad, grad_rejected=-grad)


@dataclass(frozen=True)
class DpoResult:
    loss: float
    margin: float
    grad_chosen: float
    grad_rejected: float


def dpo_loss(policy_logps, ref_logps, config: DpoConfig = DpoConfig()) -> DpoResult:
    """
    -log sigmoid(beta * [(pi_w - ref_w) - (pi_l - ref_l)]).

    Gradients are with respect to the policy log-probabilities of the chosen
    and rejected responses.
    """
    policy_chosen, policy_rejected = (float(x) for x in policy_logps)
    ref_chosen, ref_rejected = (float(x) for x in ref_logps)
    margin = config.beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected))
    if not np.isfinite(margin):
        raise NumericError("DPO log-probabilities must be finite")
    grad = -config.beta * float(sigmoid(-margin))
    return DpoResult(
        loss=-float(log_sigmoid(margin)),
        margin=margin,
        grad_chosen=grad,
        grad_rejected=-grad,
    )


def _response_logprob(model: ToyTransformer, prompt, response) -> tuple[float, np.ndarray]:
    """Summed log-probability of `response` after `prompt`, and its gradient w.r.t. logit_bias."""
    tokens = model.check_tokens(list(prompt) + list(response))
    log_probs = log_softmax_rows(model.forward(tokens))
    # a response token with no preceding context is not scored
    scored = np.arange(max(len(prompt), 1), tokens.size)
    targets = tokens[scored]
    logp = float(log_probs[scored - 1, targets].sum())
    grad = np.bincount(targets, minlength=model.vocab_size).astype(np.float64)
    grad -= np.exp(log_probs[scored - 1]).sum(axis=0)
    return logp, grad


def sequence_logprob(model: ToyTransformer, prompt, response) -> float:
    return _response_logprob(model, prompt, response)[0]


@dataclass(frozen=True)
class LogProbCache:
    """
    Reference-model log-probabilities keyed by (pair id, branch).

    Written once per dataset snapshot, then read-only.
    """

    snapshot_id: str
    entries: Mapping[tuple[int, Branch], float]

    def __post_init__(self):
        for key, value in self.entries.items():
            if not np.isfinite(value):
                raise NumericError(f"Cached log-probability for {key} is not finite")
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __getitem__(self, key: tuple[int, Branch]) -> float:
        try:
            return self.entries[key]
        except KeyError:
            raise InvalidArgumentError(
                f"No cached log-probability for pair {key[0]} {key[1].name.lower()} "
                f"in snapshot {self.snapshot_id!r}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    def reference_logps(self, pair_id: int) -> tuple[float, float]:
        return self[(pair_id, Branch.CHOSEN)], self[(pair_id, Branch.REJECTED)]


def build_logp_cache(
    reference: ToyTransformer, pairs, snapshot_id: str = "snapshot-0"
) -> LogProbCache:
    entries = {}
    for pair_id, pair in enumerate(pairs):
        for branch in Branch:
            entries[(pair_id, branch)] = sequence_logprob(
                reference, pair.prompt, pair.response(branch)
            )
    logger.info("cached %d reference log-probs for %s", len(entries), snapshot_id)
    return LogProbCache(snapshot_id=snapshot_id, entries=entries)


@dataclass(frozen=True)
class DpoStep:
    step: int
    loss: float
    mean_margin: float


@dataclass
class DpoTrainingResult:
    trajectory: list[DpoStep]
    policy: ToyTransformer = field(repr=False)


def train_dpo(
    policy: ToyTransformer,
    pairs,
    config: DpoConfig,
    steps: int,
    lr: float,
    reference: LogProbCache | ToyTransformer,
) -> DpoTrainingResult:
    """
    Gradient descent on the policy's readout bias with the mean DPO loss.

    `reference` is either a prebuilt `LogProbCache` or a live reference model
    scored inline on every step.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("DPO training needs at least one pair")
    if steps < 1 or not lr > 0:
        raise InvalidArgumentError(f"Need steps >= 1 and lr > 0, got {steps}, {lr}")

    trajectory = []
    for step in range(steps):
        total_loss, total_margin = 0.0, 0.0
        grad = np.zeros(policy.vocab_size)
        for pair_id, pair in enumerate(pairs):
            chosen, chosen_grad = _response_logprob(policy, pair.prompt, pair.chosen)
            rejected, rejected_grad = _response_logprob(policy, pair.prompt, pair.rejected)
            if isinstance(reference, LogProbCache):
                ref = reference.reference_logps(pair_id)
            else:
                ref = (
                    sequence_logprob(reference, pair.prompt, pair.chosen),
                    sequence_logprob(reference, pair.prompt, pair.rejected),
                )
            result = dpo_loss((chosen, rejected), ref, config)
            total_loss += result.loss
            total_margin += result.margin
            grad += result.grad_chosen * chosen_grad + result.grad_rejected * rejected_grad

        n = len(pairs)
        trajectory.append(DpoStep(step, total_loss / n, total_margin / n))
        policy = policy.with_logit_bias(policy.logit_bias - lr * grad / n)
    return DpoTrainingResult(trajectory=trajectory, policy=policy)


@dataclass(frozen=True)
class SharedPrefixScore:
    chosen_logp: float
    rejected_logp: float
    recompute_savings: int


@dataclass
class _PromptSession:
    cache: KvCache
    last_logits: np.ndarray | None
    prompt_len: int

    def __post_init__(self):
        self.boundary = self.cache.checkpoint()

    def score(self, model: ToyTransformer, response) -> float:
        total = 0.0
        logits = self.last_logits
        for index, token in enumerate(response):
            if logits is not None:
                total += float(log_softmax(logits)[token])
            if index < len(response) - 1:
                logits, _ = decode_step(model, self.cache, int(token))
        return total

    def rewind(self) -> None:
        self.cache.rollback(self.boundary)
        if self.cache.position != self.prompt_len:
            raise CacheStateError(
                f"Rollback left the cache at {self.cache.position}, "
                f"prompt ends at {self.prompt_len}"
            )


def _open_session(model: ToyTransformer, prompt) -> _PromptSession:
    cache = KvCache.for_model(model)
    logits = prefill(model, cache, prompt)
    return _PromptSession(cache, logits[-1] if len(prompt) else None, len(prompt))


def score_pair_shared_prefix(model: ToyTransformer, pair: PreferencePair) -> SharedPrefixScore:
    """
    Forward the prompt once, score chosen from its cache, roll the cache back
    to the prompt boundary and score rejected.
    """
    model.check_tokens(list(pair.prompt) + list(pair.chosen) + list(pair.rejected))
    session = _open_session(model, pair.prompt)
    chosen = session.score(model, pair.chosen)
    session.rewind()
    rejected = session.score(model, pair.rejected)
    return SharedPrefixScore(chosen, rejected, recompute_savings=len(pair.prompt))


def score_batch_shared_prefix(model: ToyTransformer, pairs) -> list[SharedPrefixScore]:
    """All chosen responses first, then all rejected ones, each from its prompt cache."""
    pairs = list(pairs)
    sessions = [_open_session(model, pair.prompt) for pair in pairs]
    chosen = [session.score(model, pair.chosen) for session, pair in zip(sessions, pairs)]
    for session in sessions:
        session.rewind()
    rejected = [session.score(model, pair.rejected) for session, pair in zip(sessions, pairs)]
    return [
        SharedPrefixScore(c, r, recompute_savings=len(pair.prompt))
        for c, r, pair in zip(chosen, rejected, pairs)
    ]


def batch_dpo_loss(scores, cache: LogProbCache, config: DpoConfig = DpoConfig()) -> float:
    losses = [
        dpo_loss((score.chosen_logp, score.rejected_logp), cache.reference_logps(i), config).loss
        for i, score in enumerate(scores)
    ]
    return float(np.mean(losses))


RewardFn = Callable[[tuple[int, ...], tuple[int, ...]], float]


def generate(
    model: ToyTransformer,
    prompt,
    max_new_tokens: int,
    temperature: float,
    rng: np.random.Generator,
    session: _PromptSession | None = None,
) -> tuple[int, ...]:
    """Seeded categorical sampling continuing from the prompt cache."""
    if not temperature > 0:
        raise InvalidArgumentError(f"Temperature must be > 0, got {temperature}")
    session = session or _open_session(model, prompt)
    logits = session.last_logits
    tokens = []
    for index in range(max_new_tokens):
        token = int(rng.choice(model.vocab_size, p=softmax(logits / temperature)))
        tokens.append(token)
        if index < max_new_tokens - 1:
            logits, _ = decode_step(model, session.cache, token)
    return tuple(tokens)


def sample_and_pair(
    model: ToyTransformer,
    reward_fn: RewardFn,
    prompt,
    n_candidates: int = 16,
    temperatures=DEFAULT_TEMPERATURES,
    min_gap: float = 0.0,
    max_new_tokens: int = 8,
    seed: int = 0,
) -> PreferencePair | None:
    """
    Sample candidates with temperatures cycled from `temperatures`, score them
    and pair the best with the worst. Returns None when the reward gap is below
    `min_gap` or the candidates are indistinguishable.
    """
    if n_candidates < 2:
        raise InvalidArgumentError(f"Need at least 2 candidates, got {n_candidates}")
    if min_gap < 0:
        raise InvalidArgumentError(f"min_gap must be >= 0, got {min_gap}")
    if not prompt:
        raise InvalidArgumentError("Sampling needs a non-empty prompt")
    if not temperatures:
        raise InvalidArgumentError("At least one temperature is required")
    prompt = tuple(int(t) for t in model.check_tokens(prompt))

    session = _open_session(model, prompt)
    candidates = []
    for index in range(n_candidates):
        rng = make_rng(spawn_seed(seed, index))
        temperature = temperatures[index % len(temperatures)]
        candidates.append(generate(model, prompt, max_new_tokens, temperature, rng, session))
        session.rewind()

    if len(set(candidates)) == 1:
        return None
    rewards = np.array([reward_fn(prompt, candidate) for candidate in candidates])
    best, worst = int(np.argmax(rewards)), int(np.argmin(rewards))
    if rewards[best] - rewards[worst] < min_gap or candidates[best] == candidates[worst]:
        return None
    return PreferencePair(prompt, candidates[best], candidates[worst])


@dataclass
class RewardHead:
    """Linear reward on the mean final hidden state of a toy model."""

    weights: np.ndarray
    bias: float = 0.0

    def features(self, model: ToyTransformer, prompt, response) -> np.ndarray:
        return model.hidden_states(list(prompt) + list(response)).mean(axis=0)

    def score(self, model: ToyTransformer, prompt, response) -> float:
        return float(self.features(model, prompt, response) @ self.weights + self.bias)

    def reward_fn(self, model: ToyTransformer) -> RewardFn:
        return lambda prompt, response: self.score(model, prompt, response)


def train_reward_head(
    model: ToyTransformer,
    pairs,
    steps: int = 100,
    lr: float = 0.05,
) -> tuple[RewardHead, list[float]]:
    """Fit a `RewardHead` with the Bradley-Terry loss; returns the head and per-step mean loss."""
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("Reward training needs at least one pair")
    head = RewardHead(weights=np.zeros(model.d_model))
    differences = np.stack(
        [
            head.features(model, p.prompt, p.chosen) - head.features(model, p.prompt, p.rejected)
            for p in pairs
        ]
    )
    losses = []
    for _ in range(steps):
        grad = np.zeros_like(head.weights)
        total = 0.0
        for difference in differences:
            result = bt_loss(float(difference @ head.weights), 0.0)
            total += result.loss
            grad += result.grad_chosen * difference
        losses.append(total / len(pairs))
        head.weights = head.weights - lr * grad / len(pairs)
    return head, losses


@dataclass(frozen=True)
class DpoStage:
    name: str
    pairs: int
    initial_loss: float
    final_loss: float


@dataclass
class OnlineDpoResult:
    stages: list[DpoStage]
    policy: ToyTransformer = field(repr=False)


def online_dpo(
    policy: ToyTransformer,
    reference: ToyTransformer,
    offline_pairs,
    prompts,
    reward_fn: RewardFn,
    config: DpoConfig = DpoConfig(),
    iterations: int = 2,
    steps: int = 5,
    lr: float = 0.5,
    n_candidates: int = 16,
    min_gap: float = 0.0,
    seed: int = 42,
) -> OnlineDpoResult:
    """
    Offline DPO on the given pairs, then `iterations` rounds of
    rebuild cache -> train -> resample using the latest policy.
    """
    stages = []

    def run_stage(name: str, pairs) -> ToyTransformer:
        cache = build_logp_cache(reference, pairs, snapshot_id=name)
        run = train_dpo(policy, pairs, config, steps, lr, cache)
        stages.append(
            DpoStage(name, len(pairs), run.trajectory[0].loss, run.trajectory[-1].loss)
        )
        return run.policy

    policy = run_stage("offline", list(offline_pairs))
    for iteration in range(iterations):
        pairs = []
        for index, prompt in enumerate(prompts):
            pair = sample_and_pair(
                policy,
                reward_fn,
                prompt,
                n_candidates=n_candidates,
                min_gap=min_gap,
                seed=spawn_seed(seed, iteration * len(prompts) + index),
            )
            if pair is not None:
                pairs.append(pair)
        if not pairs:
            logger.warning("online iteration %d produced no pairs", iteration)
            continue
        policy = run_stage(f"online-{iteration}", pairs)
    return OnlineDpoResult(stages=stages, policy=policy)


def read_pairs(path: Path | str) -> list[PreferencePair]:
    """One JSON object per line with integer lists under prompt, chosen and rejected."""
    pairs = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            pairs.append(
                PreferencePair(record["prompt"], record["chosen"], record["rejected"])
            )
        except (KeyError, TypeError, ValueError) as error:
            raise InvalidArgumentError(f"Line {number} of {path}: {error}")
    return pairs
