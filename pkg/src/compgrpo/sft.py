"""Supervised warm-up: teacher-forced cross-entropy with plain mini-batch descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .corpus import Dataset
from .policy import EOS, PolicyError, PolicyParams, TokenObjective, build_rows, rows_backward, rows_log_probs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def training_pairs(dataset: Dataset) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    return [(ex.source, ex.target + (EOS,)) for ex in dataset.examples]


def sft_objective(pairs) -> TokenObjective:
    """Mean per-token negative log-likelihood (EOS included)."""

    def fn(lps):
        n = sum(len(lp) for lp in lps)
        return -float(sum(lp.sum() for lp in lps)) / n, [np.full_like(lp, -1.0 / n) for lp in lps]

    return TokenObjective(pairs, fn)


def train_sft(
    dataset: Dataset,
    params: PolicyParams,
    config: SftConfig,
    on_epoch: Callable[[int, float, PolicyParams], None] | None = None,
) -> tuple[PolicyParams, list[float]]:
    """Minimize token-level cross-entropy; returns final params and per-epoch mean loss.

    The epoch loss is the token-weighted mean of the mini-batch losses, each
    measured before its update.
    """
    rows = build_rows(params, training_pairs(dataset))  # raises OOVError
    rng = np.random.default_rng(config.seed)
    vector = params.vector.copy()
    trace = []
    order = np.arange(len(dataset))
    for epoch in range(1, config.epochs + 1):
        if config.shuffle:
            order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = rows.subset(order[start:start + config.batch_size])
            lp, cache = rows_log_probs(params, batch, vector)
            n = len(lp)
            loss = -float(lp.sum()) / n
            if not np.isfinite(loss):
                raise PolicyError(f"non-finite loss at epoch {epoch}")
            grad = rows_backward(params, cache, np.full(n, -1.0 / n))
            vector -= config.learning_rate * grad
            total += loss * n
            count += n
        trace.append(total / count)
        log.info("sft epoch %d loss %.6f", epoch, trace[-1])
        if on_epoch is not None:
            on_epoch(epoch, trace[-1], params.replace(vector))
    return params.replace(vector), trace
