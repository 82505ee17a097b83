"""Exact and variational mutual-information measurements (all in nats).

Conditional models are anything with ``sample(given, rng)`` and
``log_prob(given, outputs)`` over lists of token tuples; see
:class:`TabularConditional` and :class:`NeuralConditional`.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import seqmodel

Seq = tuple[int, ...]


class InconsistentTableError(ValueError):
    pass


class InfiniteKLError(ValueError):
    """The backward model gives zero mass to a source the posterior supports."""


class JointTable:
    """Finite joint distribution over (source, target) sequence pairs."""

    def __init__(self, rows: Iterable[tuple[Sequence[int], Sequence[int], float]]):
        merged: dict[tuple[Seq, Seq], float] = defaultdict(float)
        for s, t, p in rows:
            if p < 0 or not math.isfinite(p):
                raise InconsistentTableError(f"invalid probability {p}")
            merged[tuple(s), tuple(t)] += p
        total = math.fsum(merged.values())
        if abs(total - 1.0) > 1e-12:
            raise InconsistentTableError(f"probabilities sum to {total!r}, not 1")
        self.rows = [(s, t, p) for (s, t), p in merged.items() if p > 0]

    def __len__(self):
        return len(self.rows)

    def source_marginal(self) -> dict[Seq, float]:
        out: dict[Seq, float] = defaultdict(float)
        for s, _, p in self.rows:
            out[s] += p
        return dict(out)

    def target_marginal(self) -> dict[Seq, float]:
        out: dict[Seq, float] = defaultdict(float)
        for _, t, p in self.rows:
            out[t] += p
        return dict(out)

    def transposed(self) -> "JointTable":
        return JointTable((t, s, p) for s, t, p in self.rows)

    def source_entropy(self) -> float:
        return entropy(self.source_marginal().values())

    def conditional(self) -> "TabularConditional":
        """True P(T|S)."""
        ps = self.source_marginal()
        table: dict[Seq, dict[Seq, float]] = defaultdict(dict)
        for s, t, p in self.rows:
            table[s][t] = p / ps[s]
        return TabularConditional(table)

    def posterior(self) -> "TabularConditional":
        """True P(S|T)."""
        return self.transposed().conditional()

    def sample(self, n: int, rng: np.random.Generator) -> list[tuple[Seq, Seq]]:
        probs = np.array([p for _, _, p in self.rows])
        idx = rng.choice(len(self.rows), size=n, p=probs / probs.sum())
        return [(self.rows[i][0], self.rows[i][1]) for i in idx]


def entropy(probs: Iterable[float]) -> float:
    return -math.fsum(p * math.log(p) for p in probs if p > 0)


class ConditionalModel(Protocol):
    def sample(self, given: Sequence[Seq], rng: np.random.Generator) -> list[Seq]: ...
    def log_prob(self, given: Sequence[Seq], outputs: Sequence[Seq]) -> np.ndarray: ...


class TabularConditional:
    """Explicit conditional table ``table[given][output] = prob``."""

    def __init__(self, table: Mapping[Seq, Mapping[Seq, float]]):
        self.table = {tuple(g): {tuple(o): float(p) for o, p in row.items()}
                      for g, row in table.items()}

    @classmethod
    def random(cls, givens: Sequence[Seq], outputs: Sequence[Seq], rng: np.random.Generator,
               concentration: float = 1.0) -> "TabularConditional":
        table = {}
        for g in givens:
            w = rng.dirichlet(np.full(len(outputs), concentration))
            table[tuple(g)] = {tuple(o): float(p) for o, p in zip(outputs, w)}
        return cls(table)

    def sample(self, given, rng):
        out = []
        for g in given:
            row = self.table[tuple(g)]
            keys = list(row)
            p = np.array([row[k] for k in keys])
            out.append(keys[rng.choice(len(keys), p=p / p.sum())])
        return out

    def log_prob(self, given, outputs):
        vals = []
        for g, o in zip(given, outputs):
            p = self.table.get(tuple(g), {}).get(tuple(o), 0.0)
            vals.append(math.log(p) if p > 0 else -math.inf)
        return np.array(vals)


class NeuralConditional:
    """Adapter exposing a :class:`seqmodel.SeqModelParams` as a conditional model."""

    def __init__(self, params: seqmodel.SeqModelParams, max_len: int | None = None,
                 batch_size: int = 512):
        self.params = params
        self.max_len = max_len
        self.batch_size = batch_size

    def sample(self, given, rng):
        out: list[Seq] = []
        cfg = seqmodel.DecodeConfig(max_len=self.max_len)
        for i in range(0, len(given), self.batch_size):
            chunk = [list(g) for g in given[i:i + self.batch_size]]
            lat = seqmodel.encode(self.params, chunk)
            seqs, _ = seqmodel.sample(self.params, lat, rng, cfg)
            out.extend(tuple(s) for s in seqs)
        return out

    def log_prob(self, given, outputs):
        out = []
        for i in range(0, len(given), self.batch_size):
            g = [list(x) for x in given[i:i + self.batch_size]]
            o = [list(x) for x in outputs[i:i + self.batch_size]]
            lat = seqmodel.encode(self.params, g)
            out.append(seqmodel.log_prob(self.params, lat, o, self.max_len).value)
        return np.concatenate(out)


def exact_mi(joint: JointTable) -> float:
    """I(S;T) = sum p(s,t) log p(s,t) / (p(s) p(t))."""
    ps, pt = joint.source_marginal(), joint.target_marginal()
    terms = []
    for s, t, p in joint.rows:
        if ps[s] <= 0 or pt[t] <= 0:
            raise InconsistentTableError("positive joint mass on a zero-probability marginal")
        terms.append(p * (math.log(p) - math.log(ps[s]) - math.log(pt[t])))
    return max(0.0, math.fsum(terms))


@dataclass
class BoundEstimate:
    bound: float
    stderr: float
    relative: bool  # True when H(S) is unknown and omitted


def variational_bound(source, forward: ConditionalModel, backward: ConditionalModel,
                      n_samples: int, rng: np.random.Generator) -> BoundEstimate:
    """Monte Carlo estimate of H(S) + E_S E_{T'~P(T|S)} log Q(S|T').

    ``source`` is a :class:`JointTable` (sources stratified by their exact
    marginal, H(S) included) or a sequence of sources / pairs (uniform over the
    listed items, H(S) dropped and the result flagged ``relative``).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if isinstance(source, JointTable):
        marg = source.source_marginal()
        srcs = list(marg)
        weights = np.array([marg[s] for s in srcs])
        h = source.source_entropy()
        relative = False
    else:
        items = [tuple(x[0]) if isinstance(x[0], (tuple, list)) else tuple(x) for x in source]
        counts: dict[Seq, int] = defaultdict(int)
        for s in items:
            counts[s] += 1
        srcs = list(counts)
        weights = np.array([counts[s] for s in srcs], dtype=np.float64) / len(items)
        h = 0.0
        relative = True
    per = max(2, math.ceil(n_samples / len(srcs)))
    given = [s for s in srcs for _ in range(per)]
    t_prime = forward.sample(given, rng)
    lq = backward.log_prob(t_prime, given).reshape(len(srcs), per)
    means = lq.mean(axis=1)
    var = lq.var(axis=1, ddof=1) if per > 1 else np.zeros(len(srcs))
    est = h + float(weights @ means)
    stderr = float(math.sqrt(np.sum(weights ** 2 * var) / per))
    return BoundEstimate(est, stderr, relative)


def _renormalized_log_q(joint: JointTable, backward: ConditionalModel) -> dict[tuple[Seq, Seq], float]:
    """log Q~(s|t) with Q renormalised over the table's source support."""
    sources = list(joint.source_marginal())
    targets = list(joint.target_marginal())
    given = [t for t in targets for _ in sources]
    outs = [s for _ in targets for s in sources]
    lq = backward.log_prob(given, outs).reshape(len(targets), len(sources))
    out = {}
    for i, t in enumerate(targets):
        row = lq[i]
        finite = np.isfinite(row)
        if finite.any():
            mx = row[finite].max()
            lse = mx + math.log(np.exp(row[finite] - mx).sum())
        else:
            lse = -math.inf
        for j, s in enumerate(sources):
            out[s, t] = row[j] - lse
    return out


def expected_log_q(joint: JointTable, backward: ConditionalModel, renormalize: bool = True) -> float:
    """E_{P(S,T)}[log Q(S|T)], exactly by enumeration."""
    if renormalize:
        lq = _renormalized_log_q(joint, backward)
        vals = [p * lq[s, t] for s, t, p in joint.rows]
    else:
        given = [t for _, t, _ in joint.rows]
        outs = [s for s, _, _ in joint.rows]
        lqs = backward.log_prob(given, outs)
        vals = [p * l for (_, _, p), l in zip(joint.rows, lqs)]
    return math.fsum(vals)


def posterior_kl(joint: JointTable, backward: ConditionalModel) -> float:
    """E_{P(T)} KL(P(S|T) || Q~(S|T)) with Q renormalised over the source support."""
    lq = _renormalized_log_q(joint, backward)
    pt = joint.target_marginal()
    terms = []
    for s, t, p in joint.rows:
        if not math.isfinite(lq[s, t]):
            raise InfiniteKLError(f"backward assigns zero mass to source {s} given target {t}")
        post = p / pt[t]
        terms.append(p * (math.log(post) - lq[s, t]))
    return max(0.0, math.fsum(terms))


@dataclass
class InfoReport:
    exact_mi: float | None
    bound_estimate: float
    bound_stderr: float
    posterior_kl: float | None
    source_entropy: float | None
    relative: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def info_report(joint: JointTable | None, forward: ConditionalModel, backward: ConditionalModel,
                n_samples: int, rng: np.random.Generator, sources=None) -> InfoReport:
    if joint is not None:
        est = variational_bound(joint, forward, backward, n_samples, rng)
        try:
            kl = posterior_kl(joint, backward)
        except InfiniteKLError:
            kl = math.inf
        return InfoReport(exact_mi(joint), est.bound, est.stderr, kl, joint.source_entropy())
    est = variational_bound(sources, forward, backward, n_samples, rng)
    return InfoReport(None, est.bound, est.stderr, None, None, relative=True)


def _as_distribution(d):
    if isinstance(d, Mapping):
        pts, w = zip(*sorted(d.items()))
    else:
        pts, w = d
    pts = np.asarray(pts, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if pts.shape != w.shape or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("distribution must have nonnegative weights summing to 1")
    return pts, w


def wasserstein_1d(p, q) -> float:
    """W1 between finite distributions on the line: the area between their CDFs.

    Each argument is ``{point: mass}`` or a ``(points, masses)`` pair.
    """
    xp, wp = _as_distribution(p)
    xq, wq = _as_distribution(q)
    grid = np.unique(np.concatenate([xp, xq]))
    if grid.size < 2:
        return 0.0
    cdf_p = np.array([wp[xp <= g].sum() for g in grid[:-1]])
    cdf_q = np.array([wq[xq <= g].sum() for g in grid[:-1]])
    return float(np.sum(np.abs(cdf_p - cdf_q) * np.diff(grid)))
