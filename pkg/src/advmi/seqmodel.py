"""GRU encoder-decoder with dot-product attention.

The same architecture serves as the forward network P(T|S) and the backward
network Q(S|T).  All functions are batched: sequences are passed as lists of
token-id lists and per-sequence results come back as arrays of length B.

Weights are either a :class:`SeqModelParams` (evaluated on a throwaway,
non-recording tape) or a mapping of tape tensors from
:meth:`SeqModelParams.bind`, in which case everything is differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
NEG_INF = -1e9

TokenSequence = Sequence[int]


class SequencePair(NamedTuple):
    source: tuple[int, ...]
    target: tuple[int, ...]


class Vocab:
    """Bijective token <-> id map with the four reserved ids first."""

    def __init__(self, content_tokens: Iterable[str]):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for tok in content_tokens:
            if tok in self.index:
                raise ValueError(f"duplicate token {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)
        if len(self.tokens) < 5:
            raise ValueError("vocabulary needs at least one content token")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def content_tokens(self) -> list[str]:
        return self.tokens[len(RESERVED):]

    def encode(self, words: Sequence[str], strict: bool = False) -> list[int]:
        if strict:
            missing = [w for w in words if w not in self.index]
            if missing:
                raise KeyError(f"tokens not in vocabulary: {missing}")
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed: int = 32
    hidden: int = 64
    max_len: int = 16  # cap on target length, EOS excluded

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be >= 5")
        if self.embed < 1 or self.hidden < 1 or self.max_len < 1:
            raise ValueError("embed, hidden and max_len must be positive")


@dataclass(frozen=True)
class DecodeConfig:
    max_len: int | None = None  # None -> the model's cap
    beam_width: int = 1
    temperature: float = 1.0

    def __post_init__(self):
        if self.max_len is not None and self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, E, H = cfg.vocab_size, cfg.embed, cfg.hidden
    return {
        "emb": (V, E),
        "enc_f_W": (E, 3 * H), "enc_f_U": (H, 3 * H), "enc_f_b": (3 * H,),
        "enc_b_W": (E, 3 * H), "enc_b_U": (H, 3 * H), "enc_b_b": (3 * H,),
        "init_W": (2 * H, H), "init_b": (H,),
        "dec_W": (E, 3 * H), "dec_U": (H, 3 * H), "dec_b": (3 * H,),
        "att_W": (2 * H, H),
        "out_W": (3 * H, V), "out_b": (V,),
    }


@dataclass
class SeqModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.weights):
            raise ValueError(f"weight names {sorted(self.weights)} do not match {sorted(shapes)}")
        for k, shp in shapes.items():
            w = np.asarray(self.weights[k], dtype=np.float64)
            if w.shape != shp:
                raise ValueError(f"{k}: expected shape {shp}, got {w.shape}")
            self.weights[k] = w

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, scale: float = 0.1):
        ws = {k: rng.uniform(-scale, scale, size=s) for k, s in param_shapes(config).items()}
        return cls(config, ws)

    @classmethod
    def zeros(cls, config: ModelConfig):
        return cls(config, {k: np.zeros(s) for k, s in param_shapes(config).items()})

    def copy(self) -> "SeqModelParams":
        return SeqModelParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def bind(self, tape: Tape, prefix: str = "") -> dict[str, Tensor]:
        """Place the weights on ``tape`` as named variables."""
        return {k: tape.variable(v, name=prefix + k) for k, v in self.weights.items()}

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(v))) for v in self.weights.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())


Weights = Mapping[str, Tensor]


@dataclass
class BoundModel:
    """Weights resolved onto a tape plus the static config."""

    config: ModelConfig
    w: Weights
    tape: Tape


def bind(params, tape: Tape | None = None) -> BoundModel:
    if isinstance(params, BoundModel):
        return params
    if isinstance(params, SeqModelParams):
        tape = tape or Tape(recording=False)
        return BoundModel(params.config, {k: tape.constant(v) for k, v in params.weights.items()},
                          tape)
    raise TypeError(f"expected SeqModelParams or BoundModel, got {type(params).__name__}")


def bound(params: SeqModelParams, tape: Tape, prefix: str = "") -> BoundModel:
    """Differentiable view of ``params`` on ``tape`` with variable names ``prefix + name``."""
    return BoundModel(params.config, params.bind(tape, prefix), tape)


@dataclass
class LatentState:
    """Encoder output: ``z`` (B, 2H) plus attention memory (B, L, 2H)."""

    z: Tensor
    memory: Tensor
    mask: np.ndarray  # (B, L) 1.0 on real positions

    @property
    def batch(self) -> int:
        return self.z.shape[0]

    def select(self, rows) -> "LatentState":
        """Constant copy of some rows (for sampling and beams, no gradient)."""
        rows = np.asarray(rows, dtype=np.intp)
        t = Tape(recording=False)
        return LatentState(t.constant(self.z.value[rows]), t.constant(self.memory.value[rows]),
                           self.mask[rows])

    def gather(self, rows) -> "LatentState":
        """Differentiable row selection (e.g. repeating each source m times)."""
        rows = np.asarray(rows, dtype=np.intp)
        return LatentState(ad.take(self.z, rows), ad.take(self.memory, rows), self.mask[rows])

    def detached(self) -> "LatentState":
        return self.select(np.arange(self.batch))


def pad_batch(seqs: Sequence[TokenSequence], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    if len(seqs) == 0:
        raise ValueError("empty batch")
    lengths = [len(s) for s in seqs]
    if min(lengths) < 1:
        raise ValueError("sequences must be non-empty")
    ids = np.full((len(seqs), max(lengths)), PAD, dtype=np.intp)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    mask = (np.arange(ids.shape[1])[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    bad = (ids < 0) | (ids >= vocab_size)
    if bad.any():
        raise ValueError(f"token id out of range for vocab of size {vocab_size}")
    return ids, mask


def _gru(w: Weights, prefix: str, xw: Tensor, h: Tensor, H: int) -> Tensor:
    """One GRU step given the precomputed input projection ``xw`` (B, 3H)."""
    hu = h @ w[prefix + "U"]
    rz = ad.sigmoid(xw[:, :2 * H] + hu[:, :2 * H])
    r, u = rz[:, :H], rz[:, H:]
    n = ad.tanh(xw[:, 2 * H:] + r * hu[:, 2 * H:])
    return n + u * (h - n)


def encode(params, sources: Sequence[TokenSequence]) -> LatentState:
    m = bind(params)
    cfg, w, tape = m.config, m.w, m.tape
    H, E = cfg.hidden, cfg.embed
    ids, mask = pad_batch(sources, cfg.vocab_size)
    B, L = ids.shape
    x = ad.take(w["emb"], ids).reshape(B * L, E)
    outs = {}
    finals = {}
    for d, order in (("f", range(L)), ("b", range(L - 1, -1, -1))):
        xw = ((x @ w[f"enc_{d}_W"]) + w[f"enc_{d}_b"]).reshape(B, L, 3 * H)
        h = tape.constant(np.zeros((B, H)))
        for t in order:
            h_new = _gru(w, f"enc_{d}_", xw[:, t, :], h, H)
            m_t = mask[:, t:t + 1]
            h = h_new if m_t.all() else h + tape.constant(m_t) * (h_new - h)
            outs[d, t] = h
        finals[d] = h
    memory = ad.stack([ad.concat([outs["f", t], outs["b", t]], axis=1) for t in range(L)], axis=1)
    z = ad.concat([finals["f"], finals["b"]], axis=1)
    return LatentState(z, memory, mask)


def vocab_mask(step: int, vocab_size: int, max_len: int) -> np.ndarray:
    """Additive logit mask for decoder output step ``step`` (0-based).

    Reserved ids are never emitted except EOS, which is legal from step 1 and
    forced once ``max_len`` content tokens have been produced.
    """
    m = np.zeros(vocab_size)
    m[[PAD, BOS, UNK]] = NEG_INF
    if step == 0:
        m[EOS] = NEG_INF
    elif step >= max_len:
        m[:] = NEG_INF
        m[EOS] = 0.0
    return m


class _Decoder:
    """Step-wise decoder over a latent batch; shared by scoring and generation."""

    def __init__(self, m: BoundModel, latent: LatentState, max_len: int):
        cfg, w, tape = m.config, m.w, m.tape
        self.cfg, self.w, self.tape, self.max_len = cfg, w, tape, max_len
        B, L = latent.mask.shape
        H = cfg.hidden
        z, memory = latent.z, latent.memory
        if z.tape is not tape:
            z, memory = tape.constant(z.value), tape.constant(memory.value)
        self.memory = memory
        self.keys = (memory.reshape(B * L, 2 * H) @ w["att_W"]).reshape(B, L, H)
        self.att_bias = tape.constant(np.where(latent.mask > 0, 0.0, NEG_INF))
        self.B, self.L = B, L
        self.s0 = ad.tanh(z @ w["init_W"] + w["init_b"])

    def step(self, s: Tensor, prev: np.ndarray, t: int) -> tuple[Tensor, Tensor]:
        """Advance with input tokens ``prev``; return (new state, masked log-probs)."""
        cfg, w, H = self.cfg, self.w, self.cfg.hidden
        xw = ad.take(w["emb"], prev) @ w["dec_W"] + w["dec_b"]
        s = _gru(w, "dec_", xw, s, H)
        scores = (self.keys * s.reshape(self.B, 1, H)).sum(axis=2) + self.att_bias
        alpha = ad.softmax(scores, axis=1)
        ctx = (self.memory * alpha.reshape(self.B, self.L, 1)).sum(axis=1)
        logits = ad.concat([s, ctx], axis=1) @ w["out_W"] + w["out_b"]
        logits = logits + vocab_mask(t, cfg.vocab_size, self.max_len)
        return s, ad.log_softmax(logits, axis=1)


def _bind_for(params, latent: LatentState) -> BoundModel:
    if isinstance(params, BoundModel):
        return params
    return bind(params, latent.z.tape if latent.z.tape.recording else None)


def log_prob(params, latent: LatentState, targets: Sequence[TokenSequence],
             max_len: int | None = None) -> Tensor:
    """Teacher-forced log P(target, EOS | latent) per row, shape (B,)."""
    m = _bind_for(params, latent)
    cap = max_len or m.config.max_len
    if len(targets) != latent.batch:
        raise ValueError(f"{len(targets)} targets for a latent batch of {latent.batch}")
    lengths = np.array([len(t) for t in targets])
    if lengths.max(initial=0) > cap:
        raise ValueError(f"target longer than the cap of {cap} tokens")
    ids, _ = pad_batch(targets, m.config.vocab_size)
    B, Lt = ids.shape
    dec = _Decoder(m, latent, cap)
    rows = np.arange(B)
    s = dec.s0
    total = None
    prev = np.full(B, BOS, dtype=np.intp)
    for t in range(Lt + 1):
        s, logp = dec.step(s, prev, t)
        y = np.where(t < lengths, ids[:, t] if t < Lt else PAD, np.where(t == lengths, EOS, PAD))
        picked = logp[rows, y]
        live = (t <= lengths).astype(np.float64)
        term = picked if live.all() else picked * live
        total = term if total is None else total + term
        prev = ids[:, t] if t < Lt else prev
    return total


def _inference(params) -> BoundModel:
    if isinstance(params, BoundModel):
        if not params.tape.recording:
            return params
        tape = Tape(recording=False)
        return BoundModel(params.config, {k: tape.constant(v.value) for k, v in params.w.items()},
                          tape)
    return bind(params)


def _generate(m: BoundModel, latent: LatentState, max_len: int, choose) -> tuple[list, np.ndarray]:
    latent = latent.detached() if latent.z.tape.recording else latent
    dec = _Decoder(m, latent, max_len)
    B = dec.B
    seqs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    score = np.zeros(B)
    prev = np.full(B, BOS, dtype=np.intp)
    s = dec.s0
    for t in range(max_len + 1):
        s, logp = dec.step(s, prev, t)
        lp = logp.value
        tok = choose(lp)
        for i in np.flatnonzero(~done):
            score[i] += lp[i, tok[i]]
            if tok[i] == EOS:
                done[i] = True
            else:
                seqs[i].append(int(tok[i]))
        if done.all():
            break
        prev = np.where(done, PAD, tok)
    return seqs, score


def sample(params, latent: LatentState, rng: np.random.Generator,
           config: DecodeConfig = DecodeConfig()) -> tuple[list[list[int]], np.ndarray]:
    """Ancestral sampling, one sequence per latent row.

    Returns the sequences and their untempered log-probabilities, which match
    :func:`log_prob` of the same sequences.
    """
    m = _inference(params)
    cap = config.max_len or m.config.max_len
    temp = config.temperature

    def choose(lp):
        logits = lp / temp
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(lp.shape[0])
        idx = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
        # guard against u landing above a cumsum that rounds below 1
        return np.minimum(idx, lp.shape[1] - 1 - np.argmax(p[:, ::-1] > 0, axis=1))

    return _generate(m, latent, cap, choose)


def greedy_decode(params, latent: LatentState, config: DecodeConfig = DecodeConfig()):
    """Per-step argmax; ``np.argmax`` breaks ties toward the lowest id."""
    m = _inference(params)
    cap = config.max_len or m.config.max_len
    seqs, _ = _generate(m, latent, cap, lambda lp: np.argmax(lp, axis=1))
    return seqs


def greedy_decode_with_score(params, latent: LatentState, config: DecodeConfig = DecodeConfig()):
    m = _inference(params)
    cap = config.max_len or m.config.max_len
    return _generate(m, latent, cap, lambda lp: np.argmax(lp, axis=1))


def beam_decode(params, latent: LatentState, config: DecodeConfig = DecodeConfig()):
    """Beam search on each latent row; raw summed log-probs, no length penalty.

    The greedy hypothesis is always kept as a finished candidate, so the
    result never scores below greedy decoding.
    """
    m = _inference(params)
    cap = config.max_len or m.config.max_len
    greedy, gscores = greedy_decode_with_score(m, latent, config)
    results = []
    for row in range(latent.batch):
        results.append(_beam_one(m, latent.select([row]), cap, config.beam_width,
                                 (gscores[row], greedy[row])))
    return results


def _beam_one(m: BoundModel, latent: LatentState, cap: int, width: int, greedy) -> list[int]:
    finished = [(float(greedy[0]), list(greedy[1]))]
    beams = [(0.0, [])]
    s_val = None
    for t in range(cap + 1):
        n = len(beams)
        lat = latent.select(np.zeros(n, dtype=np.intp))
        dec = _Decoder(m, lat, cap)
        s = dec.s0 if s_val is None else dec.tape.constant(s_val)
        prev = np.array([b[1][-1] if b[1] else BOS for b in beams], dtype=np.intp)
        s, logp = dec.step(s, prev, t)
        lp = logp.value
        cands = []
        for i, (score, toks) in enumerate(beams):
            for tok in np.flatnonzero(lp[i] > NEG_INF / 2):
                cands.append((score + lp[i, tok], toks + [int(tok)], i))
        cands.sort(key=lambda c: (-c[0], c[1]))
        keep, rows = [], []
        for score, toks, i in cands[:width]:
            if toks[-1] == EOS:
                finished.append((score, toks[:-1]))
            else:
                keep.append((score, toks))
                rows.append(i)
        if not keep:
            break
        best_done = max(f[0] for f in finished)
        # scores only decrease, so live beams below the best finished one are dead
        live = [(k, r) for k, r in zip(keep, rows) if k[0] >= best_done]
        if not live:
            break
        beams = [k for k, _ in live]
        s_val = s.value[[r for _, r in live]]
    finished.sort(key=lambda f: (-f[0], f[1]))
    return finished[0][1]
