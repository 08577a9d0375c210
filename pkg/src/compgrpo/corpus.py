"""Datasets: TSV ingestion, mini-SCAN generation and train/test coverage checks."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .abstraction import FORMALISMS, FormalismDescriptor, descriptor_for, extract_primitives


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    source: tuple[str, ...]
    target: tuple[str, ...]
    formalism: str = "SCAN"

    def __post_init__(self):
        if not self.source:
            raise CorpusError("empty source")
        if not self.target:
            raise CorpusError("empty target")
        if self.formalism not in FORMALISMS:
            raise CorpusError(f"unknown formalism {self.formalism!r}")

    @classmethod
    def from_text(cls, source: str, target: str, formalism: str = "SCAN") -> Example:
        return cls(tuple(source.split()), tuple(target.split()), formalism)


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    split_name: str = ""
    source_vocab: frozenset[str] = field(init=False)
    target_vocab: frozenset[str] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "source_vocab", frozenset(t for ex in self.examples for t in ex.source))
        object.__setattr__(self, "target_vocab", frozenset(t for ex in self.examples for t in ex.target))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def formalism(self) -> str | None:
        kinds = {ex.formalism for ex in self.examples}
        return kinds.pop() if len(kinds) == 1 else None

    def sources(self) -> list[tuple[str, ...]]:
        return [ex.source for ex in self.examples]

    def targets(self) -> list[tuple[str, ...]]:
        return [ex.target for ex in self.examples]


@dataclass(frozen=True)
class CoverageReport:
    test_primitives_missing_from_train: frozenset
    target_vocab_oov: frozenset[str]

    @property
    def ok(self) -> bool:
        return not self.test_primitives_missing_from_train and not self.target_vocab_oov

    def summary(self) -> str:
        missing = ", ".join(sorted(str(p) for p in self.test_primitives_missing_from_train)) or "-"
        oov = ", ".join(sorted(self.target_vocab_oov)) or "-"
        return f"coverage ok={self.ok} missing_primitives={missing} target_oov={oov}"


# ---------------------------------------------------------------------------
# TSV


def load_tsv(path: str | Path, formalism: str, split_name: str | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    formalism = formalism.upper()
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}: line {lineno}: expected exactly one tab, found {len(parts) - 1}")
            source, target = parts
            if not target.split():
                raise CorpusError(f"{path}: line {lineno}: empty target")
            if not source.split():
                raise CorpusError(f"{path}: line {lineno}: empty source")
            examples.append(Example.from_text(source, target, formalism))
    if not examples:
        raise CorpusError(f"{path}: no examples")
    return Dataset(tuple(examples), split_name if split_name is not None else path.stem)


def to_tsv(dataset: Dataset) -> str:
    return "".join(f"{' '.join(ex.source)}\t{' '.join(ex.target)}\n" for ex in dataset.examples)


def save_tsv(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(to_tsv(dataset), encoding="utf-8")


def validate_split(
    train: Dataset, test: Dataset, descriptor: FormalismDescriptor | None = None
) -> CoverageReport:
    if train.formalism is None or train.formalism != test.formalism:
        raise CorpusError(f"formalism mismatch: {train.formalism} vs {test.formalism}")
    descriptor = descriptor or descriptor_for(train.formalism)
    train_prims = set().union(*(extract_primitives(t, descriptor) for t in train.targets()))
    test_prims = set().union(*(extract_primitives(t, descriptor) for t in test.targets()))
    return CoverageReport(
        frozenset(test_prims - train_prims),
        frozenset(test.target_vocab - train.target_vocab),
    )


# ---------------------------------------------------------------------------
# mini-SCAN

PRIMITIVES = {
    "walk": "WALK",
    "run": "RUN",
    "jump": "JUMP",
    "look": "LOOK",
    "turn left": "LTURN",
    "turn right": "RTURN",
}
REPEATS = {"": 1, "twice": 2, "thrice": 3}
CONNECTIVES = ("and", "after")


@dataclass(frozen=True)
class MiniScanConfig:
    """``max_depth`` bounds the number of connectives in a command.

    ``split_rule`` is ``("length", threshold)`` or ``("template", template_id)``
    where a template id is the command with every primitive replaced by ``V``,
    e.g. ``"V twice after V"``.
    """

    max_depth: int = 2
    split_rule: tuple[str, int | str] = ("length", 7)
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise CorpusError("max_depth must be positive")
        kind, value = self.split_rule
        if kind == "length":
            if not isinstance(value, int) or value < 1:
                raise CorpusError("length threshold must be an integer >= 1")
        elif kind != "template":
            raise CorpusError(f"unknown split rule {kind!r}")


def interpret(command: Sequence[str] | str) -> list[str]:
    """Execute a mini-SCAN command.

    Connectives nest to the right: ``a after b and c`` is ``a after (b and c)``.
    """
    words = command.split() if isinstance(command, str) else list(command)
    for k, word in enumerate(words):
        if word in CONNECTIVES:
            left, right = interpret(words[:k]), interpret(words[k + 1:])
            return left + right if word == "and" else right + left
    if not words:
        raise CorpusError("empty phrase")
    times = 1
    if words[-1] in ("twice", "thrice"):
        times = REPEATS[words[-1]]
        words = words[:-1]
    action = PRIMITIVES.get(" ".join(words))
    if action is None:
        raise CorpusError(f"unknown phrase {' '.join(words)!r}")
    return [action] * times


def template_of(command: str) -> str:
    text = command
    for phrase in sorted(PRIMITIVES, key=len, reverse=True):
        text = text.replace(phrase, "V")
    return text


def enumerate_commands(max_depth: int) -> list[str]:
    phrases = [f"{p} {r}".strip() for p in PRIMITIVES for r in REPEATS]
    commands = list(phrases)
    layer = list(phrases)
    for _ in range(max_depth):
        layer = [f"{p} {c} {rest}" for p in phrases for c in CONNECTIVES for rest in layer]
        commands.extend(layer)
    return commands


def generate_mini_scan(config: MiniScanConfig) -> tuple[Dataset, Dataset]:
    examples = [
        Example(tuple(cmd.split()), tuple(interpret(cmd)), "SCAN")
        for cmd in enumerate_commands(config.max_depth)
    ]
    kind, value = config.split_rule
    if kind == "length":
        in_train = [len(ex.target) <= value for ex in examples]
    else:
        in_train = [template_of(" ".join(ex.source)) != value for ex in examples]
    train = [ex for ex, keep in zip(examples, in_train) if keep]
    test = [ex for ex, keep in zip(examples, in_train) if not keep]
    if not train or not test:
        raise CorpusError(
            f"split {kind}={value!r} leaves {len(train)} train and {len(test)} test examples"
        )
    rng = random.Random(config.seed)
    rng.shuffle(train)
    rng.shuffle(test)
    return Dataset(tuple(train), "train"), Dataset(tuple(test), "test")


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """A deterministic subset, in original order, of at most ``n`` examples."""
    if n >= len(dataset):
        return dataset
    keep = sorted(random.Random(seed).sample(range(len(dataset)), n))
    return Dataset(tuple(dataset.examples[i] for i in keep), dataset.split_name)
