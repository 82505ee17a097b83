"""Training objectives and gradient estimators for MLE, MMI and AMI.

Every ``*_grad`` function returns gradients of a loss to be *minimised*
(``params -= lr * grad``), keyed by weight name, plus a diagnostics dict.

Sign conventions, fixed once here:

* forward network: ascends ``E[K(T') * Q(S|T')] + w_tf * log P(T|S)``
* backward network (AMI): ascends ``Q(S|T) - E[K(T') * Q(S|T')]`` and is
  then clipped into ``[-c, c]``
* backward network (MMI): ascends ``E[log Q(S|T')]``

``Q`` inside rewards and the adversarial terms is the bounded score
``exp(reward_scale * log Q(S|T) / (|S| + 1))``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .seqmodel import (BoundModel, DecodeConfig, SeqModelParams, SequencePair, bound, encode,
                       log_prob, sample)

log = logging.getLogger(__name__)


@dataclass
class AmiConfig:
    clip_bound: float = 0.01
    samples_per_source: int = 1
    teacher_forcing_weight: float = 1.0
    reward_scale: float = 1.0
    real_weight: float = 1.0  # weight of the real-pair term in the backward objective
    use_multiplier: bool = True  # False -> K(T') == 1
    max_len: int | None = None  # sampling cap; None -> model cap

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ValueError("clip_bound must be positive")
        if self.samples_per_source < 1:
            raise ValueError("samples_per_source must be >= 1")
        if self.teacher_forcing_weight < 0:
            raise ValueError("teacher_forcing_weight must be nonnegative")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")


@dataclass
class BaselineState:
    """Exponential moving average of reward signals."""

    decay: float = 0.9
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")

    def current(self, signals: np.ndarray) -> float:
        """Baseline to subtract from ``signals``; the first batch seeds it with its mean."""
        return self.value if self.initialized else float(np.mean(signals))

    def update(self, signals: np.ndarray) -> None:
        m = float(np.mean(signals))
        if not self.initialized:
            self.value, self.initialized = m, True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * m


@dataclass
class RewardSample:
    target: tuple[int, ...]
    log_prob: float
    multiplier: float
    backward_score: float  # log domain, length-normalised


def _sources(pairs: Sequence[SequencePair]):
    return [list(p[0]) for p in pairs], [list(p[1]) for p in pairs]


def _norm_log_prob(m: BoundModel, given, outputs) -> Tensor:
    """log P(outputs | given) / (len + 1), per row."""
    lat = encode(m, given)
    lp = log_prob(m, lat, outputs)
    lengths = np.array([len(o) + 1 for o in outputs], dtype=np.float64)
    return lp / lengths


def mle_loss(params, pairs: Sequence[SequencePair], tape: Tape | None = None) -> Tensor:
    """Mean per-token negative log-likelihood of the targets."""
    m = params if isinstance(params, BoundModel) else _const(params, tape)
    src, tgt = _sources(pairs)
    return -_norm_log_prob(m, src, tgt).mean()


def _const(params: SeqModelParams, tape: Tape | None) -> BoundModel:
    tape = tape or Tape(recording=False)
    return BoundModel(params.config, {k: tape.constant(v) for k, v in params.weights.items()}, tape)


def score_backward(backward, sources, targets) -> Tensor:
    """Length-normalised log Q(S|T): the backward net reads T and scores S."""
    m = backward if isinstance(backward, BoundModel) else _const(backward, None)
    return _norm_log_prob(m, [list(t) for t in targets], [list(s) for s in sources])


def bounded_score(log_score, scale: float = 1.0):
    """``exp(scale * log_score)``: the reward-domain score, in (0, 1]."""
    if isinstance(log_score, Tensor):
        return ad.exp(log_score * scale)
    return np.exp(scale * np.asarray(log_score))


def sentence_embedding(seq: Sequence[int], embedding: np.ndarray) -> np.ndarray:
    return embedding[np.asarray(seq, dtype=np.intp)].mean(axis=0)


def cosine_multiplier(target: Sequence[int], target_prime: Sequence[int],
                      embedding: np.ndarray) -> float:
    """K(T') = 1 - cos(T, T') over mean token embeddings, in [0, 2]."""
    if len(target) == 0 or len(target_prime) == 0:
        raise ValueError("sequences must be non-empty")
    if list(target) == list(target_prime):
        return 0.0
    a = sentence_embedding(target, embedding)
    b = sentence_embedding(target_prime, embedding)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        log.debug("zero-norm sentence embedding; K set to 1")
        return 1.0
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return 1.0 - cos


def multipliers(targets, targets_prime, embedding: np.ndarray, enabled: bool = True) -> np.ndarray:
    if not enabled:
        return np.ones(len(targets_prime))
    return np.array([cosine_multiplier(t, tp, embedding) for t, tp in zip(targets, targets_prime)])


def clip_weights(params: SeqModelParams, c: float) -> SeqModelParams:
    if not c > 0:
        raise ValueError("clip bound must be positive")
    return SeqModelParams(params.config, {k: np.clip(v, -c, c) for k, v in params.weights.items()})


def clip_saturation(params: SeqModelParams, c: float) -> float:
    """Fraction of weights sitting on the clip boundary."""
    n = sum(v.size for v in params.weights.values())
    hit = sum(int(np.sum(np.abs(v) >= c)) for v in params.weights.values())
    return hit / n


def _draw(forward: SeqModelParams, latent, rng, cfg: AmiConfig, sources):
    """Sample T' for every latent row; empty samples cannot occur (EOS is masked at step 0)."""
    seqs, lps = sample(forward, latent.detached(), rng, DecodeConfig(max_len=cfg.max_len))
    for i, s in enumerate(seqs):
        if not s:
            retry, lp = sample(forward, latent.select([i]), rng, DecodeConfig(max_len=cfg.max_len))
            seqs[i], lps[i] = retry[0], lp[0]
    return seqs, lps


def reinforce_forward_grad(forward: SeqModelParams, backward: SeqModelParams,
                           pairs: Sequence[SequencePair], noise_policy, baseline: BaselineState | None,
                           rng: np.random.Generator, config: AmiConfig):
    """REINFORCE estimate for the forward network plus the teacher-forcing term.

    Signal ``r = K(T') * Q(S|T')`` with T' drawn from the (optionally
    noise-perturbed) forward model; ``baseline=None`` means b = 0.
    """
    from .lns import draw_delta  # local: lns imports this module

    src, tgt = _sources(pairs)
    m_per = config.samples_per_source
    rows = np.repeat(np.arange(len(pairs)), m_per)
    tape = Tape()
    fw = bound(forward, tape)
    lat = encode(fw, src).gather(rows)
    if noise_policy is not None:
        delta = draw_delta(noise_policy, lat.z.value, rng)
        lat = type(lat)(lat.z + tape.constant(delta), lat.memory, lat.mask)
    samples, _ = _draw(forward, lat, rng, config, src)
    s_rep = [src[i] for i in rows]
    t_rep = [tgt[i] for i in rows]
    log_q = score_backward(backward, s_rep, samples).value
    k = multipliers(t_rep, samples, forward.weights["emb"], config.use_multiplier)
    r = k * bounded_score(log_q, config.reward_scale)
    ok = np.isfinite(r)
    if not ok.all():
        log.warning("skipping %d samples with non-finite reward", int((~ok).sum()))
    r_ok = np.where(ok, r, 0.0)
    b = 0.0 if baseline is None else (baseline.current(r_ok[ok]) if ok.any() else baseline.value)
    adv = np.where(ok, r_ok - b, 0.0)
    if baseline is not None and ok.any():
        baseline.update(r_ok[ok])
    lp = log_prob(fw, lat, samples, config.max_len)
    objective = (lp * adv).sum() / len(samples)
    if config.teacher_forcing_weight > 0:
        tf = _norm_log_prob(fw, src, tgt).mean()
        objective = objective + tf * config.teacher_forcing_weight
    grads = tape.grad(-objective)
    diag = {"reward_mean": float(np.mean(r_ok)), "reward_var": float(np.var(r_ok)),
            "baseline": b, "k_mean": float(np.mean(k)), "samples": samples,
            "sources": s_rep, "targets": t_rep, "multipliers": k, "skipped": int((~ok).sum())}
    return grads, diag


def backward_ami_grad(forward: SeqModelParams, backward: SeqModelParams,
                      pairs: Sequence[SequencePair], samples: Sequence[Sequence[int]],
                      config: AmiConfig, sample_rows: Sequence[int] | None = None):
    """Gradient for the backward net: raise Q(S|T) on real pairs, lower K*Q(S|T') on synthetic ones.

    ``samples[j]`` belongs to ``pairs[sample_rows[j]]``; by default samples
    are laid out ``samples_per_source`` per pair, in pair order.
    """
    if len(samples) == 0:
        raise ValueError("need at least one synthetic sample")
    src, tgt = _sources(pairs)
    if sample_rows is None:
        per = len(samples) // len(pairs)
        sample_rows = np.repeat(np.arange(len(pairs)), per)
    tape = Tape()
    bw = bound(backward, tape)
    s_rep = [src[i] for i in sample_rows]
    t_rep = [tgt[i] for i in sample_rows]
    k = multipliers(t_rep, samples, forward.weights["emb"], config.use_multiplier)
    objective = None
    if config.real_weight != 0:
        real = bounded_score(score_backward(bw, src, tgt), config.reward_scale).mean()
        objective = real * config.real_weight
    live = k != 0
    if live.any():
        idx = np.flatnonzero(live)
        q_fake = bounded_score(score_backward(bw, [s_rep[i] for i in idx],
                                              [samples[i] for i in idx]), config.reward_scale)
        fake = (q_fake * k[idx]).sum() / len(samples)
        objective = -fake if objective is None else objective - fake
    if objective is None:
        return {k_: np.zeros_like(v) for k_, v in backward.weights.items()}, {"k_mean": 0.0}
    grads = tape.grad(-objective)
    return grads, {"k_mean": float(np.mean(k)), "objective": float(objective.value)}


def mmi_forward_grad(forward: SeqModelParams, backward: SeqModelParams,
                     pairs: Sequence[SequencePair], rng: np.random.Generator, config: AmiConfig,
                     baseline: BaselineState | None = None):
    """Forward half of the MMI update: REINFORCE with K == 1 and no latent noise.

    The signal is the bounded score, so this coincides with AMI's forward
    update when the multiplier and noise are disabled.
    """
    fcfg = AmiConfig(**{**config.__dict__, "use_multiplier": False})
    return reinforce_forward_grad(forward, backward, pairs, None, baseline, rng, fcfg)


def mmi_backward_objective_grad(backward: SeqModelParams, sources, samples):
    """Backward half of the MMI update on given samples: ascend mean log Q(S|T')."""
    tape = Tape()
    objective = score_backward(bound(backward, tape), sources, samples).mean()
    return tape.grad(-objective), float(objective.value)


def mmi_backward_grad(forward: SeqModelParams, backward: SeqModelParams,
                      pairs: Sequence[SequencePair], rng: np.random.Generator, config: AmiConfig):
    """Draw T' from the forward model and return the MMI backward gradient."""
    src, _ = _sources(pairs)
    rows = np.repeat(np.arange(len(pairs)), config.samples_per_source)
    s_rep = [src[i] for i in rows]
    samples, _ = _draw(forward, encode(forward, s_rep), rng, config, s_rep)
    grads, value = mmi_backward_objective_grad(backward, s_rep, samples)
    return grads, {"backward_objective": value, "k_mean": 1.0}


def mmi_step(forward: SeqModelParams, backward: SeqModelParams, pairs: Sequence[SequencePair],
             rng: np.random.Generator, config: AmiConfig, baseline: BaselineState | None = None):
    """MMI baseline: both nets ascend E[log Q(S|T')] on shared samples; no adversarial term,
    no clipping."""
    f_grads, diag = mmi_forward_grad(forward, backward, pairs, rng, config, baseline)
    b_grads, value = mmi_backward_objective_grad(backward, diag["sources"], diag["samples"])
    diag["backward_objective"] = value
    return f_grads, b_grads, diag
