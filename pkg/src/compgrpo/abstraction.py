"""Primitive and skeleton extraction for SCAN, COGS, FunQL and SPARQL targets.

Token classes come from a small descriptor file per formalism (see
``descriptors/*.fd``).  A descriptor has sections of classification rules::

    [entities]
    exact:texas
    prefix:m.
    pattern:^M[0-9]+$

plus ``[meta]`` (formalism tag and parsing mode), ``[heads]`` (category to
skeleton head label) and, for FunQL, ``[arity]``.  Tokens matched by no rule
are structural.

Skeletons abstract every primitive to its category head and number argument
identifiers by first occurrence, so ``JUMP JUMP LTURN`` becomes
``V(x1) V(x1) V(x2)`` and ``answer state next_to stateid texas`` becomes
``N(x1) ∧ R(x2, x1)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

ACTION = "action"
ENTITY = "entity"
RELATION = "relation"
STRUCTURAL = "structural"
CATEGORIES = (ACTION, ENTITY, RELATION)
SEPARATOR = "∧"

MODES = ("scan", "cogs", "funql", "sparql")
FORMALISMS = ("SCAN", "COGS", "FUNQL", "SPARQL")

_SECTIONS = {
    "actions": ACTION,
    "entities": ENTITY,
    "relations": RELATION,
    "structural": STRUCTURAL,
}
_REQUIRED = {
    "scan": (ACTION,),
    "cogs": (ENTITY, RELATION),
    "funql": (ENTITY, RELATION),
    "sparql": (ENTITY, RELATION),
}
_COGS_SEPARATORS = frozenset({";", "AND"})
_LOWER_WORD = re.compile(r"^[a-z]+$")


class DescriptorError(ValueError):
    """Raised for malformed or ambiguous formalism descriptors."""


class SkeletonError(ValueError):
    """A logical form whose structure cannot be recovered."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (token {position})")
        self.position = position


@dataclass(frozen=True)
class Rule:
    kind: str
    value: str
    regex: re.Pattern | None = field(default=None, compare=False, repr=False)

    @classmethod
    def parse(cls, entry: str) -> Rule:
        kind, sep, value = entry.partition(":")
        if not sep or kind not in ("exact", "prefix", "pattern") or not value:
            raise DescriptorError(f"bad rule {entry!r}; expected exact:, prefix: or pattern:")
        regex = None
        if kind == "pattern":
            try:
                regex = re.compile(value)
            except re.error as exc:
                raise DescriptorError(f"bad pattern {value!r}: {exc}") from exc
        return cls(kind, value, regex)

    def matches(self, token: str) -> bool:
        if self.kind == "exact":
            return token == self.value
        if self.kind == "prefix":
            return token.startswith(self.value)
        return self.regex.search(token) is not None

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}"


@dataclass(frozen=True, eq=False)
class FormalismDescriptor:
    formalism: str
    mode: str
    rules: tuple[tuple[str, tuple[Rule, ...]], ...]
    heads: dict[str, str]
    arity: dict[str, int] = field(default_factory=dict)
    join: bool = False
    keep_role_suffix: bool = False
    _classified: dict[str, str] = field(default_factory=dict, repr=False)

    def rules_for(self, category: str) -> tuple[Rule, ...]:
        for cat, rules in self.rules:
            if cat == category:
                return rules
        return ()

    @property
    def entity_patterns(self) -> tuple[Rule, ...]:
        return self.rules_for(ENTITY)

    @property
    def relation_patterns(self) -> tuple[Rule, ...]:
        return self.rules_for(RELATION)

    @property
    def structural_tokens(self) -> tuple[Rule, ...]:
        return self.rules_for(STRUCTURAL)

    def head(self, category: str, name: str) -> str:
        label = self.heads[category]
        if self.keep_role_suffix and category == RELATION and "." in name:
            label = f"{label}.{name.split('.', 1)[1]}"
        return label


@dataclass(frozen=True, order=True)
class Primitive:
    category: str
    name: str

    def __str__(self) -> str:
        return f"{self.category}:{self.name}"


PrimitiveSet = frozenset  # frozenset[Primitive]


@dataclass(frozen=True)
class SkeletonToken:
    head: str
    args: tuple[int, ...] = ()

    def __str__(self) -> str:
        if not self.args:
            return self.head
        return f"{self.head}({', '.join(f'x{a}' for a in self.args)})"


SEPARATOR_TOKEN = SkeletonToken(SEPARATOR)


@dataclass(frozen=True)
class Skeleton:
    tokens: tuple[SkeletonToken, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[SkeletonToken]:
        return iter(self.tokens)

    def __getitem__(self, i: int) -> SkeletonToken:
        return self.tokens[i]

    def __str__(self) -> str:
        return " ".join(str(t) for t in self.tokens)


# ---------------------------------------------------------------------------
# descriptor files


def parse_descriptor(text: str, source: str = "<string>") -> FormalismDescriptor:
    meta: dict[str, str] = {}
    heads: dict[str, str] = {}
    arity: dict[str, int] = {}
    rules: dict[str, list[Rule]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS and section not in ("meta", "heads", "arity"):
                raise DescriptorError(f"{source}:{lineno}: unknown section [{section}]")
            if section in _SECTIONS:
                rules.setdefault(_SECTIONS[section], [])
            continue
        if section is None:
            raise DescriptorError(f"{source}:{lineno}: entry outside any section")
        if section in _SECTIONS:
            try:
                rules[_SECTIONS[section]].append(Rule.parse(line))
            except DescriptorError as exc:
                raise DescriptorError(f"{source}:{lineno}: {exc}") from None
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise DescriptorError(f"{source}:{lineno}: expected key = value")
        if section == "meta":
            meta[key] = value
        elif section == "heads":
            if key not in CATEGORIES:
                raise DescriptorError(f"{source}:{lineno}: unknown category {key!r}")
            heads[key] = value
        else:
            try:
                arity[key] = int(value)
            except ValueError:
                raise DescriptorError(f"{source}:{lineno}: arity must be an integer") from None

    formalism = meta.get("formalism", "").upper()
    if formalism not in FORMALISMS:
        raise DescriptorError(f"{source}: unknown formalism {formalism!r}")
    mode = meta.get("mode", formalism.lower())
    if mode not in MODES:
        raise DescriptorError(f"{source}: unknown mode {mode!r}")
    for category in _REQUIRED[mode]:
        if not rules.get(category):
            raise DescriptorError(f"{source}: mode {mode} needs a non-empty {category} rule list")
        if category not in heads:
            raise DescriptorError(f"{source}: no head label for {category}")
    for category, entries in rules.items():
        if not entries:
            raise DescriptorError(f"{source}: empty {category} section")

    descriptor = FormalismDescriptor(
        formalism=formalism,
        mode=mode,
        rules=tuple((cat, tuple(entries)) for cat, entries in rules.items()),
        heads=heads,
        arity=arity,
        join=_flag(meta.get("join", "false")),
        keep_role_suffix=_flag(meta.get("keep_role_suffix", "false")),
    )
    # Exact entries must not be claimed by another class; regex/regex overlap
    # is only detectable per token and surfaces in classify_token.
    for category, entries in descriptor.rules:
        for rule in entries:
            if rule.kind == "exact":
                classes = _matching_classes(rule.value, descriptor)
                if len(classes) > 1:
                    raise DescriptorError(
                        f"{source}: token {rule.value!r} matches {' and '.join(sorted(classes))}"
                    )
    return descriptor


def _flag(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "on")


def load_descriptor(path: str | Path) -> FormalismDescriptor:
    path = Path(path)
    return parse_descriptor(path.read_text(encoding="utf-8"), source=str(path))


@lru_cache(maxsize=None)
def descriptor_for(formalism: str) -> FormalismDescriptor:
    """The shipped descriptor for a formalism tag (SCAN, COGS, FUNQL, SPARQL)."""
    name = formalism.upper()
    if name not in FORMALISMS:
        raise DescriptorError(f"unknown formalism {formalism!r}")
    text = resources.files("compgrpo").joinpath("descriptors").joinpath(f"{name.lower()}.fd").read_text("utf-8")
    return parse_descriptor(text, source=f"{name.lower()}.fd")


# ---------------------------------------------------------------------------
# classification and primitives


def _matching_classes(token: str, descriptor: FormalismDescriptor) -> set[str]:
    return {cat for cat, rules in descriptor.rules if any(r.matches(token) for r in rules)}


def classify_token(token: str, descriptor: FormalismDescriptor) -> str:
    """Return ``action``, ``entity``, ``relation`` or ``structural``."""
    cached = descriptor._classified.get(token)
    if cached is not None:
        return cached
    classes = _matching_classes(token, descriptor)
    if len(classes) > 1:
        raise DescriptorError(
            f"{descriptor.formalism}: token {token!r} matches {' and '.join(sorted(classes))}"
        )
    result = classes.pop() if classes else STRUCTURAL
    descriptor._classified[token] = result
    return result


def _prepare(target: Sequence[str], descriptor: FormalismDescriptor) -> list[tuple[str, int]]:
    """Tokens paired with their original positions, glued when the descriptor asks."""
    if not descriptor.join:
        return [(tok, i) for i, tok in enumerate(target)]
    out: list[tuple[str, int]] = []
    n = len(target)
    i = 0
    while i < n:
        tok = target[i]
        if tok == "LAMBDA" and i + 1 < n:
            # the bound variable is followed by the binder dot, not a name dot
            out.append((tok, i))
            out.append((target[i + 1], i + 1))
            i += 2
            continue
        if i + 2 < n and target[i + 1] == "_" and target[i + 2].isdigit() and tok.isalpha():
            out.append((f"{tok}_{target[i + 2]}", i))
            i += 3
            continue
        if _LOWER_WORD.match(tok):
            text, j = tok, i
            while j + 2 < n and target[j + 1] == "." and _LOWER_WORD.match(target[j + 2]):
                text += "." + target[j + 2]
                j += 2
            out.append((text, i))
            i = j + 1
            continue
        out.append((tok, i))
        i += 1
    return out


def extract_primitives(target: Sequence[str], descriptor: FormalismDescriptor) -> frozenset[Primitive]:
    prims = set()
    for tok, _ in _prepare(target, descriptor):
        category = classify_token(tok, descriptor)
        if category != STRUCTURAL:
            prims.add(Primitive(category, tok))
    return frozenset(prims)


# ---------------------------------------------------------------------------
# skeletons


def _assemble(preds: list[tuple[str, tuple]], separated: bool) -> Skeleton:
    numbering: dict = {}
    tokens: list[SkeletonToken] = []
    for head, args in preds:
        idx = tuple(numbering.setdefault(a, len(numbering) + 1) for a in args)
        if separated and tokens:
            tokens.append(SEPARATOR_TOKEN)
        tokens.append(SkeletonToken(head, idx))
    return Skeleton(tuple(tokens))


def extract_skeleton(
    target: Sequence[str], descriptor: FormalismDescriptor, strict: bool = True
) -> Skeleton:
    """Abstract a target sequence into its compositional skeleton.

    With ``strict=False`` malformed spans are dropped instead of raising
    :class:`SkeletonError`; rewards use this for sampled predictions.
    """
    toks = _prepare(target, descriptor)
    if descriptor.mode == "scan":
        preds = [
            (descriptor.head(ACTION, tok), (tok,))
            for tok, _ in toks
            if classify_token(tok, descriptor) == ACTION
        ]
        return _assemble(preds, separated=False)
    if descriptor.mode == "cogs":
        return _assemble(_cogs_predicates(toks, descriptor, strict), separated=True)
    if descriptor.mode == "funql":
        return _assemble(_funql_predicates(toks, descriptor, strict), separated=True)
    return _assemble(_sparql_predicates(toks, descriptor, strict), separated=True)


def _cogs_predicates(toks, descriptor, strict):
    preds = []
    n = len(toks)
    i = 0
    while i < n:
        tok, pos = toks[i]
        if tok == "LAMBDA":
            if i + 2 < n and toks[i + 2][0] == ".":
                i += 3
                continue
            if strict:
                raise SkeletonError("LAMBDA without bound variable", pos)
            i += 1
            continue
        if tok in _COGS_SEPARATORS or tok == "*":
            i += 1
            continue
        if i + 1 < n and toks[i + 1][0] == "(":
            args, end, bad = _cogs_args(toks, i + 2)
            if bad is None:
                category = classify_token(tok, descriptor)
                if category != STRUCTURAL:
                    preds.append((descriptor.head(category, tok), tuple(args)))
                i = end + 1
                continue
            if strict:
                raise SkeletonError(f"cannot recover arguments of {tok!r}", bad)
            i += 1
            continue
        if strict:
            raise SkeletonError(f"unexpected token {tok!r}", pos)
        i += 1
    return preds


def _cogs_args(toks, start):
    """Parse ``a , b )`` from ``start``; returns (args, index of ')', bad position)."""
    args: list[str] = []
    expect_arg = True
    j = start
    while j < len(toks):
        tok, pos = toks[j]
        if tok == ")":
            if expect_arg:
                return args, j, pos
            return args, j, None
        if expect_arg and tok not in ("(", ",", ")"):
            args.append(tok)
            expect_arg = False
        elif not expect_arg and tok == ",":
            expect_arg = True
        else:
            return args, j, pos
        j += 1
    end_pos = toks[-1][1] + 1 if toks else 0
    return args, j, end_pos


@dataclass
class _Node:
    name: str
    position: int
    children: list[_Node] = field(default_factory=list)


def _funql_predicates(toks, descriptor, strict):
    remaining = list(toks)
    while True:
        try:
            roots = _funql_trees(remaining, descriptor, strict)
            break
        except SkeletonError as err:
            if strict:
                raise
            # drop the offending token and retry; terminates since input shrinks
            drop = next((k for k, (_, pos) in enumerate(remaining) if pos == err.position), None)
            if drop is None:
                return []
            del remaining[drop]

    preds: list[tuple[str, tuple]] = []
    counter = iter(range(1 << 30))

    def visit(node: _Node) -> int:
        child_vars = [visit(c) for c in node.children]
        category = classify_token(node.name, descriptor)
        if category == ENTITY:
            var = next(counter)
            preds.append((descriptor.head(ENTITY, node.name), (var,)))
            return var
        if category == RELATION:
            var = next(counter)
            preds.append((descriptor.head(RELATION, node.name), (var, *child_vars)))
            return var
        # structural functions (answer, state, stateid, ...) pass their argument through
        return child_vars[0] if child_vars else next(counter)

    for root in roots:
        visit(root)
    return preds


def _funql_trees(toks, descriptor, strict) -> list[_Node]:
    bracketed = any(tok == "(" for tok, _ in toks)
    pos = 0
    n = len(toks)
    end_position = toks[-1][1] + 1 if toks else 0

    def arity(name: str) -> int:
        if name in descriptor.arity:
            return descriptor.arity[name]
        return 0 if classify_token(name, descriptor) == ENTITY else 1

    def prefix_node() -> _Node:
        nonlocal pos
        name, where = toks[pos]
        pos += 1
        node = _Node(name, where)
        for _ in range(arity(name)):
            if pos >= n:
                if strict:
                    raise SkeletonError(f"{name!r} is missing arguments", end_position)
                break
            node.children.append(prefix_node())
        return node

    def bracket_node() -> _Node:
        nonlocal pos
        name, where = toks[pos]
        if name in ("(", ")", ","):
            raise SkeletonError(f"unexpected {name!r}", where)
        pos += 1
        node = _Node(name, where)
        if pos < n and toks[pos][0] == "(":
            pos += 1
            while True:
                if pos >= n:
                    if strict:
                        raise SkeletonError(f"unclosed '(' after {name!r}", end_position)
                    return node
                node.children.append(bracket_node())
                if pos >= n:
                    continue
                sep, sep_pos = toks[pos]
                if sep == ",":
                    pos += 1
                elif sep == ")":
                    pos += 1
                    return node
                else:
                    raise SkeletonError(f"expected ',' or ')', got {sep!r}", sep_pos)
        return node

    roots = []
    while pos < n:
        roots.append(bracket_node() if bracketed else prefix_node())
    return roots


def _sparql_predicates(toks, descriptor, strict):
    names = [t for t, _ in toks]
    end_position = toks[-1][1] + 1 if toks else 0
    if "{" in names:
        start = names.index("{") + 1
    elif strict:
        raise SkeletonError("missing '{'", toks[0][1] if toks else 0)
    else:
        start = names.index("WHERE") + 1 if "WHERE" in names else 0
    closing = [k for k in range(start, len(names)) if names[k] == "}"]
    if closing:
        stop = closing[-1]
    elif strict:
        raise SkeletonError("missing '}'", end_position)
    else:
        stop = len(names)

    statements: list[list[tuple[str, int]]] = [[]]
    for tok in toks[start:stop]:
        if tok[0] == ".":
            statements.append([])
        else:
            statements[-1].append(tok)

    preds = []
    for stmt in statements:
        if not stmt:
            continue
        words = [t for t, _ in stmt]
        if words[0] == "FILTER":
            if len(words) == 6 and words[1] == "(" and words[5] == ")":
                preds.append(("FILTER", (words[2], words[4])))
            elif strict:
                raise SkeletonError("malformed FILTER", stmt[0][1])
            continue
        if len(words) != 3:
            if strict:
                raise SkeletonError(f"triple with {len(words)} terms", stmt[0][1])
            continue
        subj, pred, obj = words
        if pred == "a":
            preds.append((descriptor.head(ENTITY, obj), (subj,)))
        else:
            preds.append((descriptor.head(RELATION, pred), (subj, obj)))
    return preds
