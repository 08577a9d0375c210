"""Outcome rewards: exact match, primitive coverage, skeleton agreement and their mix."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence

from .abstraction import FormalismDescriptor, Skeleton, extract_primitives, extract_skeleton


class RewardMode(str, Enum):
    BINARY = "binary"
    COMPOSITE = "composite"
    PRIM_ONLY = "prim-only"
    COMP_ONLY = "comp-only"


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 0.1
    lambda2: float = 0.2
    # Without the exact-match term a permuted output with prim = comp = 1
    # ties the correct one.
    include_binary_term: bool = True

    def validate(self, mode: RewardMode) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("reward weights must be non-negative")
        if RewardMode(mode) is RewardMode.COMPOSITE and self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("composite reward needs a non-zero weight")


@dataclass(frozen=True)
class RewardBreakdown:
    binary: int
    prim: float
    comp: float
    total: float


def binary_reward(pred: Sequence[str], gold: Sequence[str]) -> int:
    return int(tuple(pred) == tuple(gold))


@lru_cache(maxsize=65536)
def _gold_primitives(gold: tuple[str, ...], descriptor: FormalismDescriptor):
    return extract_primitives(gold, descriptor)


@lru_cache(maxsize=65536)
def _gold_skeleton(gold: tuple[str, ...], descriptor: FormalismDescriptor) -> Skeleton:
    return extract_skeleton(gold, descriptor, strict=True)


def primitive_reward(pred: Sequence[str], gold: Sequence[str], descriptor: FormalismDescriptor) -> float:
    """Fraction of gold primitives present in the prediction (1.0 if gold has none)."""
    gold_prims = _gold_primitives(tuple(gold), descriptor)
    if not gold_prims:
        return 1.0
    pred_prims = extract_primitives(pred, descriptor)
    return len(pred_prims & gold_prims) / len(gold_prims)


def composition_reward(pred: Sequence[str], gold: Sequence[str], descriptor: FormalismDescriptor) -> float:
    """Position-wise skeleton agreement over the gold skeleton's length.

    Predictions are parsed leniently so sampled garbage scores low instead of
    raising.
    """
    gold_skel = _gold_skeleton(tuple(gold), descriptor)
    if len(gold_skel) == 0:
        return 1.0
    pred_skel = extract_skeleton(pred, descriptor, strict=False)
    hits = sum(1 for a, b in zip(pred_skel.tokens, gold_skel.tokens) if a == b)
    return hits / len(gold_skel)


def composite_reward(
    pred: Sequence[str],
    gold: Sequence[str],
    descriptor: FormalismDescriptor,
    weights: RewardWeights = RewardWeights(),
    mode: RewardMode | str = RewardMode.COMPOSITE,
) -> RewardBreakdown:
    mode = RewardMode(mode)
    weights.validate(mode)
    binary = binary_reward(pred, gold)
    prim = primitive_reward(pred, gold, descriptor)
    comp = composition_reward(pred, gold, descriptor)
    if mode is RewardMode.BINARY:
        total = float(binary)
    elif mode is RewardMode.PRIM_ONLY:
        total = prim
    elif mode is RewardMode.COMP_ONLY:
        total = comp
    else:
        total = weights.lambda1 * prim + weights.lambda2 * comp
        if weights.include_binary_term:
            total += binary
    return RewardBreakdown(binary, prim, comp, total)
