"""A compact autoregressive policy with hand-written reverse-mode gradients.

The next-token distribution is an MLP over

* the source, either as one embedding slot per source position (``concat``)
  or the mean of its token embeddings (``mean``), and
* the last ``context_window`` tokens of ``<bos> + prefix``,

with one tanh hidden layer and a softmax over the whole vocabulary.  All
parameters live in one flat float64 vector; :meth:`PolicyParams.unpack`
returns reshaped views.

Objectives are expressed over per-token log-probabilities: a closure maps
the log-probs of a batch of sequences to a scalar and its derivative with
respect to each log-prob, and :func:`objective_gradient` chains that through
the network.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
RESERVED = (PAD, BOS, EOS)
MAX_PARAMS = 1_000_000
CHECKPOINT_MAGIC = b"COMPGRPO-CKPT\n"
CHECKPOINT_VERSION = 1


class PolicyError(ValueError):
    pass


class OOVError(PolicyError, KeyError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise PolicyError("duplicate vocabulary entries")
        for tok in RESERVED:
            if tok not in self.tokens:
                raise PolicyError(f"reserved token {tok} missing")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, tokens: Iterable[str]) -> Vocab:
        rest = sorted(set(tokens) - set(RESERVED))
        return cls(RESERVED + tuple(rest))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise OOVError(f"out-of-vocabulary token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class ArchConfig:
    embedding_dim: int = 16
    hidden_dim: int = 128
    context_window: int = 5
    max_output_len: int = 16
    max_source_len: int = 16
    source_encoding: str = "concat"

    def __post_init__(self):
        for name in ("embedding_dim", "hidden_dim", "context_window", "max_output_len", "max_source_len"):
            if getattr(self, name) < 1:
                raise PolicyError(f"{name} must be positive")
        if self.source_encoding not in ("concat", "mean"):
            raise PolicyError(f"unknown source encoding {self.source_encoding!r}")

    @property
    def source_slots(self) -> int:
        return self.max_source_len if self.source_encoding == "concat" else 1

    @property
    def input_dim(self) -> int:
        return (self.source_slots + self.context_window) * self.embedding_dim


def param_layout(vocab_size: int, arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("embed", (vocab_size, arch.embedding_dim)),
        ("w_hidden", (arch.input_dim, arch.hidden_dim)),
        ("b_hidden", (arch.hidden_dim,)),
        ("w_out", (arch.hidden_dim, vocab_size)),
        ("b_out", (vocab_size,)),
    ]


def param_count(vocab_size: int, arch: ArchConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(vocab_size, arch))


@dataclass(frozen=True, eq=False)
class PolicyParams:
    vector: np.ndarray
    arch: ArchConfig
    vocab: Vocab

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64, copy=True)
        expected = param_count(len(self.vocab), self.arch)
        if vec.shape != (expected,):
            raise PolicyError(f"parameter vector has shape {vec.shape}, layout needs ({expected},)")
        if not np.all(np.isfinite(vec)):
            raise PolicyError("non-finite parameters")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return param_layout(len(self.vocab), self.arch)

    def unpack(self, vector: np.ndarray | None = None) -> dict[str, np.ndarray]:
        vec = self.vector if vector is None else vector
        out, offset = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = vec[offset:offset + size].reshape(shape)
            offset += size
        return out

    def replace(self, vector: np.ndarray) -> PolicyParams:
        return PolicyParams(vector, self.arch, self.vocab)


@dataclass(frozen=True)
class SampleResult:
    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]
    truncated: bool

    @property
    def body(self) -> tuple[str, ...]:
        """The output without its terminating EOS."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else self.tokens


def init_policy(vocab: Vocab, arch: ArchConfig, seed: int) -> PolicyParams:
    """Seeded initialization with a zero output layer (uniform next-token distribution)."""
    n = param_count(len(vocab), arch)
    if n > MAX_PARAMS:
        raise PolicyError(f"architecture has {n} parameters, budget is {MAX_PARAMS}")
    rng = np.random.default_rng(seed)
    vec = np.zeros(n)
    probe = PolicyParams(vec, arch, vocab)
    parts = probe.unpack(vec)
    parts["embed"][...] = rng.standard_normal(parts["embed"].shape)
    parts["w_hidden"][...] = rng.standard_normal(parts["w_hidden"].shape) / np.sqrt(arch.input_dim)
    return PolicyParams(vec, arch, vocab)


# ---------------------------------------------------------------------------
# forward / backward over rows of (source, context) -> next token


def encode_source(params: PolicyParams, source: Sequence[str]) -> np.ndarray:
    ids = params.vocab.encode(source)
    arch = params.arch
    if arch.source_encoding == "concat":
        if len(ids) > arch.max_source_len:
            raise PolicyError(f"source has {len(ids)} tokens, max_source_len is {arch.max_source_len}")
        ids = ids + [params.vocab.pad] * (arch.max_source_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def context_ids(vocab: Vocab, prefix_ids: Sequence[int], window: int) -> list[int]:
    ctx = [vocab.bos, *prefix_ids][-window:]
    return [vocab.pad] * (window - len(ctx)) + ctx


@dataclass
class Rows:
    """Teacher-forced rows for a batch of sequences."""

    sources: list[np.ndarray]  # per sequence
    source_of_row: np.ndarray
    contexts: np.ndarray
    next_ids: np.ndarray
    offsets: np.ndarray  # sequence k owns rows offsets[k]:offsets[k+1]

    @property
    def n_sequences(self) -> int:
        return len(self.offsets) - 1

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[self.offsets[k]:self.offsets[k + 1]] for k in range(self.n_sequences)]

    def subset(self, seq_indices: Sequence[int]) -> Rows:
        spans = [np.arange(self.offsets[k], self.offsets[k + 1]) for k in seq_indices]
        lengths = [len(s) for s in spans]
        take = np.concatenate(spans) if spans else np.zeros(0, dtype=np.int64)
        return Rows(
            [self.sources[k] for k in seq_indices],
            np.repeat(np.arange(len(spans)), lengths),
            self.contexts[take],
            self.next_ids[take],
            np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        )


def build_rows(params: PolicyParams, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> Rows:
    vocab, window = params.vocab, params.arch.context_window
    sources, src_row, ctxs, nxt, offsets = [], [], [], [], [0]
    for k, (source, target) in enumerate(pairs):
        sources.append(encode_source(params, source))
        ids = vocab.encode(target)
        for t, tok in enumerate(ids):
            ctxs.append(context_ids(vocab, ids[:t], window))
            nxt.append(tok)
            src_row.append(k)
        offsets.append(len(nxt))
    return Rows(
        sources,
        np.asarray(src_row, dtype=np.int64),
        np.asarray(ctxs, dtype=np.int64).reshape(-1, window),
        np.asarray(nxt, dtype=np.int64),
        np.asarray(offsets, dtype=np.int64),
    )


def _source_features(params, parts, sources: list[np.ndarray]) -> np.ndarray:
    emb = parts["embed"]
    if params.arch.source_encoding == "concat":
        ids = np.stack(sources)
        return emb[ids].reshape(len(sources), -1)
    return np.stack([emb[ids].mean(axis=0) for ids in sources])


def _forward(params: PolicyParams, sources, source_of_row, contexts, vector=None):
    parts = params.unpack(vector)
    src = _source_features(params, parts, sources)
    ctx = parts["embed"][contexts].reshape(len(contexts), -1)
    x = np.concatenate([src[source_of_row], ctx], axis=1)
    h = np.tanh(x @ parts["w_hidden"] + parts["b_hidden"])
    logits = h @ parts["w_out"] + parts["b_out"]
    cache = dict(parts=parts, x=x, h=h, sources=sources, source_of_row=source_of_row, contexts=contexts)
    return logits, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _backward(params: PolicyParams, cache, dlogits: np.ndarray) -> np.ndarray:
    parts, x, h = cache["parts"], cache["x"], cache["h"]
    arch = params.arch
    grad = np.zeros_like(params.vector)
    g = params.unpack(grad)
    g["w_out"][...] = h.T @ dlogits
    g["b_out"][...] = dlogits.sum(axis=0)
    da = (dlogits @ parts["w_out"].T) * (1.0 - h * h)
    g["w_hidden"][...] = x.T @ da
    g["b_hidden"][...] = da.sum(axis=0)
    dx = da @ parts["w_hidden"].T
    d = arch.embedding_dim
    src_width = arch.source_slots * d
    n_seq = len(cache["sources"])
    dsrc = np.zeros((n_seq, src_width))
    np.add.at(dsrc, cache["source_of_row"], dx[:, :src_width])
    demb = g["embed"]
    if arch.source_encoding == "concat":
        ids = np.stack(cache["sources"])
        np.add.at(demb, ids.ravel(), dsrc.reshape(-1, d))
    else:
        for k, ids in enumerate(cache["sources"]):
            np.add.at(demb, ids, np.broadcast_to(dsrc[k] / len(ids), (len(ids), d)))
    np.add.at(demb, cache["contexts"].ravel(), dx[:, src_width:].reshape(-1, d))
    return grad


def rows_log_probs(params: PolicyParams, rows: Rows, vector=None):
    """Per-row log-prob of the next token, plus what backward needs."""
    logits, cache = _forward(params, rows.sources, rows.source_of_row, rows.contexts, vector)
    logp_all = log_softmax(logits)
    lp = logp_all[np.arange(len(rows.next_ids)), rows.next_ids]
    cache["logp_all"] = logp_all
    cache["next_ids"] = rows.next_ids
    return lp, cache


def rows_backward(params: PolicyParams, cache, dlp: np.ndarray) -> np.ndarray:
    """Gradient of sum_r dlp[r] * logp[r] with respect to the flat parameters."""
    probs = np.exp(cache["logp_all"])
    dlogits = -probs * dlp[:, None]
    dlogits[np.arange(len(dlp)), cache["next_ids"]] += dlp
    return _backward(params, cache, dlogits)


def log_probs(params: PolicyParams, source: Sequence[str], target: Sequence[str]) -> np.ndarray:
    """Teacher-forced log-probability of each token of ``target``.

    ``target`` is scored as given; end complete outputs with ``EOS`` so the
    sum is log pi(y|x).
    """
    rows = build_rows(params, [(source, target)])
    lp, _ = rows_log_probs(params, rows)
    return lp


def next_token_distribution(params: PolicyParams, source: Sequence[str], prefix: Sequence[str]) -> np.ndarray:
    vocab = params.vocab
    ctx = np.asarray([context_ids(vocab, vocab.encode(prefix), params.arch.context_window)])
    logits, _ = _forward(params, [encode_source(params, source)], np.zeros(1, dtype=np.int64), ctx)
    return np.exp(log_softmax(logits))[0]


# ---------------------------------------------------------------------------
# objectives


@dataclass
class TokenObjective:
    """A scalar objective over the per-token log-probs of fixed sequences.

    ``fn`` receives one log-prob array per sequence and returns the value and
    the derivative of the value with respect to each of those arrays.
    """

    pairs: Sequence[tuple[Sequence[str], Sequence[str]]]
    fn: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]]
    _rows: Rows | None = None

    def rows(self, params: PolicyParams) -> Rows:
        if self._rows is None:
            self._rows = build_rows(params, self.pairs)
        return self._rows


def objective_value(params: PolicyParams, objective: TokenObjective, vector=None) -> float:
    rows = objective.rows(params)
    lp, _ = rows_log_probs(params, rows, vector)
    value, _ = objective.fn(rows.split(lp))
    return float(value)


def objective_gradient(params: PolicyParams, objective: TokenObjective) -> tuple[float, np.ndarray]:
    """Value and exact gradient of ``objective`` at ``params``."""
    rows = objective.rows(params)
    lp, cache = rows_log_probs(params, rows)
    value, dparts = objective.fn(rows.split(lp))
    if not np.isfinite(value):
        raise PolicyError(f"non-finite objective value {value}")
    dlp = np.concatenate(dparts) if dparts else np.zeros(0)
    if not np.all(np.isfinite(dlp)):
        raise PolicyError("non-finite objective derivative")
    grad = rows_backward(params, cache, dlp) if len(dlp) else np.zeros_like(params.vector)
    if not np.all(np.isfinite(grad)):
        raise PolicyError("non-finite gradient")
    return float(value), grad


def sum_log_prob_objective(pairs) -> TokenObjective:
    def fn(lps):
        return float(sum(lp.sum() for lp in lps)), [np.ones_like(lp) for lp in lps]

    return TokenObjective(pairs, fn)


# ---------------------------------------------------------------------------
# sampling


def _rng(seed) -> np.random.Generator:
    seq = np.random.SeedSequence(list(seed) if isinstance(seed, (tuple, list)) else seed)
    return np.random.Generator(np.random.PCG64(seq))


def sample_many(
    params: PolicyParams,
    sources: Sequence[Sequence[str]],
    temperature: float,
    seeds: Sequence,
    max_len: int | None = None,
) -> list[SampleResult]:
    """Ancestral sampling for several sources at once.

    Each sequence draws from its own generator, so results do not depend on
    how sequences are batched.  Recorded log-probs are under the unscaled
    policy; ``temperature`` only shapes the draw, and 0 means greedy.
    """
    if temperature < 0:
        raise PolicyError("temperature must be non-negative")
    vocab, window = params.vocab, params.arch.context_window
    max_len = params.arch.max_output_len if max_len is None else max_len
    n = len(sources)
    rngs = [_rng(s) for s in seeds] if temperature > 0 else [None] * n
    enc = [encode_source(params, s) for s in sources]
    out_ids: list[list[int]] = [[] for _ in range(n)]
    out_lp: list[list[float]] = [[] for _ in range(n)]
    done = [False] * n
    for _ in range(max_len):
        active = [k for k in range(n) if not done[k]]
        if not active:
            break
        ctx = np.asarray([context_ids(vocab, out_ids[k], window) for k in active], dtype=np.int64)
        logits, _ = _forward(params, [enc[k] for k in active], np.arange(len(active)), ctx)
        logp = log_softmax(logits)
        if temperature > 0:
            scaled = np.exp(log_softmax(logits / temperature))
        for row, k in enumerate(active):
            if temperature > 0:
                cdf = np.cumsum(scaled[row])
                tok = int(np.searchsorted(cdf, rngs[k].random() * cdf[-1], side="right"))
                tok = min(tok, len(vocab) - 1)
            else:
                tok = int(np.argmax(logp[row]))
            out_ids[k].append(tok)
            out_lp[k].append(float(logp[row, tok]))
            if tok == vocab.eos:
                done[k] = True
    return [
        SampleResult(vocab.decode(out_ids[k]), tuple(out_lp[k]), not done[k])
        for k in range(n)
    ]


def sample(params: PolicyParams, source: Sequence[str], temperature: float, seed, max_len: int | None = None) -> SampleResult:
    return sample_many(params, [source], temperature, [seed], max_len)[0]


def greedy_decode(params: PolicyParams, sources: Sequence[Sequence[str]], max_len: int | None = None) -> list[tuple[str, ...]]:
    return [r.body for r in sample_many(params, sources, 0.0, [0] * len(sources), max_len)]


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(params: PolicyParams) -> bytes:
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "arch": params.arch.__dict__,
            "vocab": list(params.vocab.tokens),
            "n_params": int(params.vector.size),
        },
        sort_keys=True,
    ).encode("utf-8")
    body = params.vector.astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> PolicyParams:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise PolicyError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = json.loads(data[offset:offset + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise PolicyError(f"{path}: unsupported checkpoint version {header.get('version')}")
    vector = np.frombuffer(data, dtype="<f8", offset=offset + hlen).astype(np.float64)
    if vector.size != header["n_params"]:
        raise PolicyError(f"{path}: truncated parameter block")
    return PolicyParams(vector, ArchConfig(**header["arch"]), Vocab(tuple(header["vocab"])))
