"""Group Relative Policy Optimization over the compact policy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .abstraction import FormalismDescriptor, descriptor_for
from .corpus import Dataset, Example
from .policy import (
    PolicyError,
    PolicyParams,
    SampleResult,
    TokenObjective,
    build_rows,
    objective_gradient,
    rows_log_probs,
    sample_many,
)
from .reward import RewardBreakdown, RewardMode, RewardWeights, composite_reward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    temperature: float = 0.6
    batch_inputs: int = 8
    learning_rate: float = 1e-2
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    inner_epochs: int = 1
    std_floor: float = 1e-8
    reward_mode: RewardMode = RewardMode.BINARY
    weights: RewardWeights = field(default_factory=RewardWeights)
    steps: int = 100
    seed: int = 0
    max_output_len: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_inputs < 1 or self.inner_epochs < 1 or self.steps < 0:
            raise ValueError("batch_inputs and inner_epochs must be positive, steps non-negative")
        if self.learning_rate <= 0 or self.clip_epsilon <= 0:
            raise ValueError("learning_rate and clip_epsilon must be positive")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")
        self.weights.validate(self.reward_mode)


@dataclass(frozen=True)
class RolloutGroup:
    source: tuple[str, ...]
    gold: tuple[str, ...]
    samples: tuple[SampleResult, ...]
    rewards: tuple[RewardBreakdown, ...]
    advantages: tuple[float, ...]

    @property
    def degenerate(self) -> bool:
        return not any(self.advantages)


@dataclass(frozen=True)
class StepStats:
    mean_reward: float
    fraction_exact_match: float
    mean_kl: float
    mean_clip_fraction: float
    grad_norm: float


TRACE_FIELDS = ("step", "mean_reward", "fraction_exact_match", "mean_kl", "mean_clip_fraction", "grad_norm")


def compute_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """Group-normalized advantages ``(r - mean) / std`` with the population std.

    Groups whose std falls below ``std_floor`` get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a rollout group needs at least two rewards")
    sigma = r.std()
    if sigma < std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def clipped_surrogate(ratio: float, advantage: float, epsilon: float) -> float:
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def _surrogate_terms(ratio: np.ndarray, advantage: float, epsilon: float):
    """Per-token surrogate, its derivative w.r.t. log pi, and the clip mask."""
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage
    value = np.minimum(unclipped, clipped)
    # gradient flows only through the unclipped branch
    dvalue = np.where(unclipped <= clipped, unclipped, 0.0)
    return value, dvalue, (ratio < 1.0 - epsilon) | (ratio > 1.0 + epsilon)


def kl_term(current: Sequence[float], reference: Sequence[float]) -> float:
    """Mean per-token ``exp(ref - cur) - (ref - cur) - 1``; non-negative."""
    cur = np.asarray(current, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if cur.shape != ref.shape:
        raise ValueError(f"misaligned log-probs: {cur.shape} vs {ref.shape}")
    if cur.size == 0:
        return 0.0
    d = ref - cur
    return float(np.mean(np.expm1(d) - d))


def _score(samples, gold, descriptor, config) -> tuple[tuple[RewardBreakdown, ...], tuple[float, ...]]:
    rewards = tuple(
        composite_reward(s.body, gold, descriptor, config.weights, config.reward_mode) for s in samples
    )
    adv = compute_advantages([r.total for r in rewards], config.std_floor)
    return rewards, tuple(float(a) for a in adv)


def make_rollout_groups(
    params: PolicyParams,
    examples: Sequence[Example],
    config: GrpoConfig,
    group_seeds: Sequence,
    descriptor: FormalismDescriptor | None = None,
) -> list[RolloutGroup]:
    """Sample ``group_size`` outputs per example; member i of a group uses seed (*group_seed, i)."""
    if not examples:
        return []
    descriptor = descriptor or descriptor_for(examples[0].formalism)
    k = config.group_size
    sources = [ex.source for ex in examples for _ in range(k)]
    seeds = [(*_as_tuple(gs), i) for gs in group_seeds for i in range(k)]
    samples = sample_many(params, sources, config.temperature, seeds, config.max_output_len)
    groups = []
    for j, ex in enumerate(examples):
        members = tuple(samples[j * k:(j + 1) * k])
        rewards, adv = _score(members, ex.target, descriptor, config)
        groups.append(RolloutGroup(ex.source, ex.target, members, rewards, adv))
    return groups


def make_rollout_group(
    params: PolicyParams,
    example: Example,
    config: GrpoConfig,
    seed=None,
    descriptor: FormalismDescriptor | None = None,
) -> RolloutGroup:
    seed = config.seed if seed is None else seed
    return make_rollout_groups(params, [example], config, [seed], descriptor)[0]


def _as_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def grpo_objective(
    groups: Sequence[RolloutGroup],
    ref_logprobs: Sequence[np.ndarray],
    config: GrpoConfig,
    stats: dict | None = None,
) -> TokenObjective:
    """The clipped, KL-regularized group objective as a token-level closure.

    For every group: (1/K) sum_i (1/|y_i|) sum_t [clip(r_it, A_i) - beta * k3_it],
    then averaged over groups.  Behavior log-probs are those recorded while
    sampling.
    """
    pairs = [(g.source, s.tokens) for g in groups for s in g.samples]
    behavior = [np.asarray(s.logprobs) for g in groups for s in g.samples]
    advantages = [a for g in groups for a in g.advantages]
    group_sizes = [len(g.samples) for g in groups]
    eps, beta = config.clip_epsilon, config.kl_beta

    def fn(lps):
        value = 0.0
        grads = []
        kl_total, clipped_tokens, n_tokens = 0.0, 0, 0
        idx = 0
        for size in group_sizes:
            scale = 1.0 / (len(group_sizes) * size)
            for _ in range(size):
                lp, lp_b, lp_r, adv = lps[idx], behavior[idx], ref_logprobs[idx], advantages[idx]
                n = len(lp)
                ratio = np.exp(lp - lp_b)
                surr, dsurr, clip_mask = _surrogate_terms(ratio, adv, eps)
                d = lp_r - lp
                k3 = np.expm1(d) - d
                value += scale * (surr.sum() - beta * k3.sum()) / n
                grads.append(scale * (dsurr + beta * np.expm1(d)) / n)
                kl_total += scale * k3.mean() * len(group_sizes)
                clipped_tokens += int(clip_mask.sum())
                n_tokens += n
                idx += 1
        if stats is not None:
            stats["kl"] = kl_total / len(group_sizes)
            stats["clip_fraction"] = clipped_tokens / max(n_tokens, 1)
        return value, grads

    return TokenObjective(pairs, fn)


def reference_logprobs(ref: PolicyParams, groups: Sequence[RolloutGroup]) -> list[np.ndarray]:
    pairs = [(g.source, s.tokens) for g in groups for s in g.samples]
    rows = build_rows(ref, pairs)
    lp, _ = rows_log_probs(ref, rows)
    return [x.copy() for x in rows.split(lp)]


def grpo_step(
    params: PolicyParams,
    ref: PolicyParams,
    groups: Sequence[RolloutGroup],
    config: GrpoConfig,
) -> tuple[PolicyParams, StepStats]:
    """``inner_epochs`` gradient-ascent updates on one batch of rollout groups."""
    ref_lp = reference_logprobs(ref, groups)
    kls, clips, norms = [], [], []
    for _ in range(config.inner_epochs):
        stats: dict = {}
        objective = grpo_objective(groups, ref_lp, config, stats)
        _, grad = objective_gradient(params, objective)
        norm = float(np.linalg.norm(grad))
        if not np.isfinite(norm):
            raise PolicyError("non-finite GRPO gradient")
        params = params.replace(params.vector + config.learning_rate * grad)
        kls.append(stats["kl"])
        clips.append(stats["clip_fraction"])
        norms.append(norm)
    rewards = [r for g in groups for r in g.rewards]
    return params, StepStats(
        mean_reward=float(np.mean([r.total for r in rewards])),
        fraction_exact_match=float(np.mean([r.binary for r in rewards])),
        mean_kl=float(np.mean(kls)),
        mean_clip_fraction=float(np.mean(clips)),
        grad_norm=float(np.mean(norms)),
    )


def write_rollouts(fh: TextIO, step: int, groups: Sequence[RolloutGroup]) -> None:
    for g in groups:
        for s, r, a in zip(g.samples, g.rewards, g.advantages):
            record = {
                "step": step,
                "input": " ".join(g.source),
                "gold": " ".join(g.gold),
                "output": " ".join(s.body),
                "truncated": s.truncated,
                "binary": r.binary,
                "prim": round(r.prim, 6),
                "comp": round(r.comp, 6),
                "total": round(r.total, 6),
                "advantage": round(a, 6),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_grpo(
    dataset: Dataset,
    init_params: PolicyParams,
    ref_params: PolicyParams,
    config: GrpoConfig,
    descriptor: FormalismDescriptor | None = None,
    on_step: Callable[[int, StepStats, PolicyParams], None] | None = None,
    rollout_log: TextIO | None = None,
) -> tuple[PolicyParams, list[StepStats]]:
    """Outer loop: shuffled input batches, rollout groups, ``grpo_step``."""
    descriptor = descriptor or descriptor_for(dataset.formalism or "SCAN")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    cursor = 0
    params = init_params
    trace = []
    for step in range(1, config.steps + 1):
        batch = []
        while len(batch) < config.batch_inputs:
            if cursor == len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            batch.append(dataset.examples[order[cursor]])
            cursor += 1
        seeds = [(config.seed, step, j) for j in range(len(batch))]
        groups = make_rollout_groups(params, batch, config, seeds, descriptor)
        if rollout_log is not None:
            write_rollouts(rollout_log, step, groups)
        params, stats = grpo_step(params, ref_params, groups, config)
        trace.append(stats)
        log.info("grpo step %d reward %.4f em %.3f kl %.5f", step, stats.mean_reward,
                 stats.fraction_exact_match, stats.mean_kl)
        if on_step is not None:
            on_step(step, stats, params)
    return params, trace
