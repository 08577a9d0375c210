"""Evaluation and behavioral analysis: accuracy, pass@k, trigram copying, length buckets."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .abstraction import FormalismDescriptor
from .corpus import CorpusError, Dataset
from .policy import PolicyParams, greedy_decode, sample_many
from .reward import binary_reward, composition_reward, primitive_reward

Tokens = Sequence[str]


@dataclass(frozen=True)
class EvalReport:
    exact_match: float
    prim_accuracy: float
    comp_accuracy: float
    n_examples: int

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("exact_match", self.exact_match),
            ("prim_accuracy", self.prim_accuracy),
            ("comp_accuracy", self.comp_accuracy),
            ("n_examples", self.n_examples),
        ]


def evaluate(preds: Sequence[Tokens], golds: Sequence[Tokens], descriptor: FormalismDescriptor) -> EvalReport:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold outputs")
    if not preds:
        raise ValueError("nothing to evaluate")
    em = [binary_reward(p, g) for p, g in zip(preds, golds)]
    prim = [primitive_reward(p, g, descriptor) for p, g in zip(preds, golds)]
    comp = [composition_reward(p, g, descriptor) for p, g in zip(preds, golds)]
    return EvalReport(float(np.mean(em)), float(np.mean(prim)), float(np.mean(comp)), len(preds))


def decode(params: PolicyParams, dataset: Dataset, max_len: int | None = None) -> list[tuple[str, ...]]:
    return greedy_decode(params, dataset.sources(), max_len)


# ---------------------------------------------------------------------------
# pass@k


def sample_candidates(
    params: PolicyParams,
    sources: Sequence[Tokens],
    k: int,
    temperature: float = 0.6,
    seed: int = 0,
    max_len: int | None = None,
) -> list[list[tuple[str, ...]]]:
    """``k`` samples per source; sample j of example i uses seed (seed, i, j)."""
    flat_sources = [s for s in sources for _ in range(k)]
    seeds = [(seed, i, j) for i in range(len(sources)) for j in range(k)]
    results = sample_many(params, flat_sources, temperature, seeds, max_len)
    return [[r.body for r in results[i * k:(i + 1) * k]] for i in range(len(sources))]


def pass_at_k_from_samples(
    samples: Sequence[Sequence[Tokens]], golds: Sequence[Tokens], ks: Iterable[int]
) -> dict[int, float]:
    """Fraction of examples with an exact match among their first k samples."""
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ValueError("k must be >= 1")
    if len(samples) != len(golds):
        raise ValueError("samples and golds are misaligned")
    if any(len(s) < ks[-1] for s in samples):
        raise ValueError(f"need {ks[-1]} samples per example")
    first_hit = []
    for cands, gold in zip(samples, golds):
        gold = tuple(gold)
        first_hit.append(next((j for j, c in enumerate(cands) if tuple(c) == gold), math.inf))
    n = len(golds)
    return {k: sum(1 for h in first_hit if h < k) / n for k in ks}


def pass_at_k(
    params: PolicyParams,
    dataset: Dataset,
    k: int | Sequence[int],
    temperature: float = 0.6,
    seed: int = 0,
) -> float | dict[int, float]:
    """pass@k over one shared set of max(k) samples per example.

    An int ``k`` returns a float; a sequence returns ``{k: value}``.
    """
    ks = [k] if isinstance(k, int) else list(k)
    if min(ks) < 1:
        raise ValueError("k must be >= 1")
    samples = sample_candidates(params, dataset.sources(), max(ks), temperature, seed)
    result = pass_at_k_from_samples(samples, dataset.targets(), ks)
    return result[k] if isinstance(k, int) else result


# ---------------------------------------------------------------------------
# trigram copying analysis


def trigrams(tokens: Tokens) -> list[tuple[str, str, str]]:
    return [tuple(tokens[i:i + 3]) for i in range(len(tokens) - 2)]


@dataclass(frozen=True)
class TrigramTable:
    freqs: dict[tuple[str, str, str], float]
    total: int

    def __getitem__(self, trigram) -> float:
        return self.freqs.get(tuple(trigram), 0.0)


def build_trigram_table(train_targets: Iterable[Tokens]) -> TrigramTable:
    counts: Counter = Counter()
    for target in train_targets:
        counts.update(trigrams(target))
    total = sum(counts.values())
    if total == 0:
        return TrigramTable({}, 0)
    return TrigramTable({t: c / total for t, c in counts.items()}, total)


@dataclass(frozen=True)
class CopyingScore:
    mean_freq: float
    n_scored: int
    n_skipped: int


def copying_score(
    incorrect_preds: Sequence[Tokens], matching_golds: Sequence[Tokens], table: TrigramTable
) -> CopyingScore:
    """Mean training-trigram frequency of wrong predictions.

    Trigrams that occur anywhere in the paired gold are excluded; predictions
    left with no trigrams are skipped and counted.  ``mean_freq`` is NaN when
    nothing could be scored.
    """
    if len(incorrect_preds) != len(matching_golds):
        raise ValueError("predictions and golds are misaligned")
    per_pred = []
    skipped = 0
    for i, (pred, gold) in enumerate(zip(incorrect_preds, matching_golds)):
        if tuple(pred) == tuple(gold):
            raise ValueError(f"prediction {i} equals its gold output")
        gold_grams = set(trigrams(gold))
        kept = [t for t in trigrams(pred) if t not in gold_grams]
        if not kept:
            skipped += 1
            continue
        per_pred.append(sum(table[t] for t in kept) / len(kept))
    mean = float(np.mean(per_pred)) if per_pred else math.nan
    return CopyingScore(mean, len(per_pred), skipped)


def incorrect_pairs(preds: Sequence[Tokens], golds: Sequence[Tokens]) -> tuple[list, list]:
    wrong = [(p, g) for p, g in zip(preds, golds) if tuple(p) != tuple(g)]
    return [p for p, _ in wrong], [g for _, g in wrong]


# ---------------------------------------------------------------------------
# length buckets

BUCKETS = (("<24", 0, 23), ("24-26", 24, 26), ("27-30", 27, 30), ("31-35", 31, 35), ("36+", 36, None))


def bucket_of(length: int) -> str:
    for label, lo, hi in BUCKETS:
        if length >= lo and (hi is None or length <= hi):
            return label
    raise ValueError(f"negative length {length}")


@dataclass(frozen=True)
class BucketStats:
    label: str
    count: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else math.nan


@dataclass(frozen=True)
class LengthBuckets:
    buckets: tuple[BucketStats, ...]

    def __getitem__(self, label: str) -> BucketStats:
        for b in self.buckets:
            if b.label == label:
                return b
        raise KeyError(label)

    @property
    def total(self) -> int:
        return sum(b.count for b in self.buckets)


def length_bucket_report(preds: Sequence[Tokens], golds: Sequence[Tokens]) -> LengthBuckets:
    """Exact match per gold-length bucket; ``<24`` holds the short desk-scale outputs."""
    if len(preds) != len(golds):
        raise ValueError("predictions and golds are misaligned")
    count: Counter = Counter()
    correct: Counter = Counter()
    for pred, gold in zip(preds, golds):
        label = bucket_of(len(gold))
        count[label] += 1
        correct[label] += tuple(pred) == tuple(gold)
    return LengthBuckets(tuple(BucketStats(label, count[label], correct[label]) for label, _, _ in BUCKETS))


# ---------------------------------------------------------------------------
# prediction dumps and report files


def read_prediction_dump(path: str | Path) -> list[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]]:
    """Rows of ``source<TAB>gold<TAB>prediction``; the prediction may be empty."""
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"{path}: line {lineno}: expected source, gold and prediction columns")
            src, gold, pred = (tuple(p.split()) for p in parts)
            if not gold:
                raise CorpusError(f"{path}: line {lineno}: empty gold output")
            rows.append((src, gold, pred))
    if not rows:
        raise CorpusError(f"{path}: no predictions")
    return rows


def write_prediction_dump(path: str | Path, sources, golds, preds) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s, g, p in zip(sources, golds, preds, strict=True):
            fh.write(f"{' '.join(s)}\t{' '.join(g)}\t{' '.join(p)}\n")


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.6f}"


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])
