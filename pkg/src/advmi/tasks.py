"""Synthetic sequence tasks with known joint distributions, and TSV corpora."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .infometrics import JointTable
from .seqmodel import RESERVED, SequencePair, Vocab

KINDS = ("copy", "reverse", "cipher", "bland_mixture")
MAX_JOINT_ROWS = 100_000


class CorpusError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab_size: int = 16  # content tokens
    min_len: int = 1
    max_len: int = 8
    mixture_p: float = 0.5
    n_sources: int = 8  # bland_mixture only
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 content tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.mixture_p <= 1.0:
            raise ValueError("mixture_p must lie in [0, 1]")
        if self.kind == "bland_mixture":
            if self.vocab_size < 3:
                raise ValueError("bland_mixture needs at least 3 content tokens")
            n_possible = sum((self.vocab_size - 1) ** L
                             for L in range(self.min_len, self.max_len + 1))
            if self.n_sources < 1 or self.n_sources > n_possible:
                raise ValueError(f"cannot draw {self.n_sources} distinct sources")


@dataclass
class Dataset:
    pairs: list[SequencePair]
    vocab: Vocab
    joint: JointTable | None = None
    spec: TaskSpec | None = None

    def __len__(self):
        return len(self.pairs)

    def sources(self) -> list[tuple[int, ...]]:
        return [p.source for p in self.pairs]


def task_vocab(spec: TaskSpec) -> Vocab:
    return Vocab(f"w{k}" for k in range(spec.vocab_size))


def _structure(spec: TaskSpec):
    """Deterministic pieces of a task drawn from its seed: permutation, bland sources."""
    rng = np.random.default_rng([spec.seed, 1])
    base = len(RESERVED)
    perm = base + rng.permutation(spec.vocab_size)
    extra: dict = {"perm": perm}
    if spec.kind == "bland_mixture":
        # token w0 is reserved for the generic reply; the rest build sources/unique replies
        content = np.arange(base + 1, base + spec.vocab_size)
        sub = content[rng.permutation(len(content))]
        cipher = dict(zip(content.tolist(), sub.tolist()))
        seen: set = set()
        sources = []
        while len(sources) < spec.n_sources:
            L = int(rng.integers(spec.min_len, spec.max_len + 1))
            s = tuple(int(x) for x in rng.choice(content, size=L))
            if s not in seen:
                seen.add(s)
                sources.append(s)
        extra.update(sources=sources, cipher=cipher,
                     generic=tuple([base] * spec.min_len))
    return extra


def _map_target(spec: TaskSpec, src: tuple, extra) -> tuple:
    if spec.kind == "copy":
        return src
    if spec.kind == "reverse":
        return src[::-1]
    if spec.kind == "cipher":
        base = len(RESERVED)
        return tuple(int(extra["perm"][t - base]) for t in src)
    return tuple(extra["cipher"][t] for t in src)  # bland unique reply


def exact_joint(spec: TaskSpec) -> JointTable | None:
    """The task's true P(S, T), or None when it has more than MAX_JOINT_ROWS rows."""
    extra = _structure(spec)
    base = len(RESERVED)
    if spec.kind == "bland_mixture":
        p_src = 1.0 / spec.n_sources
        rows = []
        for s in extra["sources"]:
            unique = _map_target(spec, s, extra)
            if spec.mixture_p > 0:
                rows.append((s, extra["generic"], p_src * spec.mixture_p))
            if spec.mixture_p < 1:
                rows.append((s, unique, p_src * (1 - spec.mixture_p)))
        return JointTable(_renormalized(rows))
    lengths = range(spec.min_len, spec.max_len + 1)
    if sum(spec.vocab_size ** L for L in lengths) > MAX_JOINT_ROWS:
        return None
    tokens = range(base, base + spec.vocab_size)
    rows = []
    for L in lengths:
        p = 1.0 / len(lengths) / spec.vocab_size ** L
        for s in itertools.product(tokens, repeat=L):
            rows.append((s, _map_target(spec, s, extra), p))
    return JointTable(_renormalized(rows))


def _renormalized(rows):
    total = math.fsum(p for _, _, p in rows)
    return [(s, t, p / total) for s, t, p in rows]


def generate(spec: TaskSpec, n_pairs: int) -> Dataset:
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    extra = _structure(spec)
    rng = np.random.default_rng([spec.seed, 2])
    base = len(RESERVED)
    pairs = []
    if spec.kind == "bland_mixture":
        src_idx = rng.integers(0, spec.n_sources, size=n_pairs)
        generic = rng.random(n_pairs) < spec.mixture_p
        for i, g in zip(src_idx, generic):
            s = extra["sources"][i]
            pairs.append(SequencePair(s, extra["generic"] if g else _map_target(spec, s, extra)))
    else:
        lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n_pairs)
        for L in lengths:
            s = tuple(int(x) for x in rng.integers(base, base + spec.vocab_size, size=L))
            pairs.append(SequencePair(s, _map_target(spec, s, extra)))
    return Dataset(pairs, task_vocab(spec), exact_joint(spec), spec)


def write_corpus(dataset: Dataset, path: str | Path) -> None:
    """Write ``source<TAB>target`` lines of space-separated tokens."""
    v = dataset.vocab
    lines = [" ".join(v.decode(p.source)) + "\t" + " ".join(v.decode(p.target))
             for p in dataset.pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path, format: str = "tsv", vocab: Vocab | None = None) -> Dataset:
    """Read a TSV corpus; the vocabulary is built in order of first appearance unless given."""
    if format != "tsv":
        raise ValueError(f"unsupported corpus format {format!r}")
    text = Path(path).read_text(encoding="utf-8")
    raw = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError("expected exactly one tab separating source and target", lineno)
        src, tgt = parts[0].split(), parts[1].split()
        if not src or not tgt:
            raise CorpusError("empty source or target", lineno)
        for tok in src + tgt:
            if tok in RESERVED:
                raise CorpusError(f"reserved token {tok!r} in corpus", lineno)
        raw.append((src, tgt, lineno))
    if not raw:
        raise CorpusError("corpus is empty")
    if vocab is None:
        order: dict[str, None] = {}
        for src, tgt, _ in raw:
            for tok in src + tgt:
                order.setdefault(tok, None)
        vocab = Vocab(order)
    pairs = []
    for src, tgt, lineno in raw:
        try:
            pairs.append(SequencePair(tuple(vocab.encode(src, strict=True)),
                                      tuple(vocab.encode(tgt, strict=True))))
        except KeyError as exc:
            raise CorpusError(str(exc), lineno) from None
    return Dataset(pairs, vocab)


def split(dataset: Dataset, fractions: Sequence[float], seed: int = 0):
    """Seeded shuffle into (train, valid, test).

    Valid and test sizes are ``floor(fraction * n)``; the remainder goes to train.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, not 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    n_train = n - n_valid - n_test
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple(Dataset([dataset.pairs[i] for i in idx], dataset.vocab, dataset.joint, dataset.spec)
                 for idx in parts)
