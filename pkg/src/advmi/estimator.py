"""scikit-learn style facade over the trainer.

``X`` is a list of source sentences and ``y`` a list of target sentences;
each sentence is either a whitespace-separated string or a list of tokens.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import trainer
from .infometrics import NeuralConditional, variational_bound
from .seqmodel import DecodeConfig, SequencePair, Vocab, beam_decode, encode, greedy_decode
from .tasks import Dataset
from .textmetrics import bleu


def _tokens(sentence) -> list[str]:
    toks = sentence.split() if isinstance(sentence, str) else [str(t) for t in sentence]
    if not toks:
        raise ValueError("empty sentence")
    return toks


class AmiSeq2Seq(BaseEstimator):
    """Sequence transducer trained with MLE, MMI or AMI.

    Parameters mirror :class:`advmi.trainer.TrainConfig`; only the most
    commonly tuned ones are exposed, the rest keep their defaults unless
    passed through ``extra``.
    """

    def __init__(self, mode: str = "ami", hidden: int = 64, embed: int = 32, max_len: int = 8,
                 pretrain_steps: int = 2000, outer_iters: int = 50, batch_size: int = 32,
                 clip_bound: float = 0.01, lam: float = 0.1, beam_width: int = 1,
                 random_state: int = 0, extra: dict | None = None):
        self.mode = mode
        self.hidden = hidden
        self.embed = embed
        self.max_len = max_len
        self.pretrain_steps = pretrain_steps
        self.outer_iters = outer_iters
        self.batch_size = batch_size
        self.clip_bound = clip_bound
        self.lam = lam
        self.beam_width = beam_width
        self.random_state = random_state
        self.extra = extra

    def _config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            mode=self.mode, hidden=self.hidden, embed=self.embed, max_len=self.max_len,
            pretrain_steps=self.pretrain_steps, outer_iters=self.outer_iters,
            batch_size=self.batch_size, clip_bound=self.clip_bound, lam=self.lam,
            seed=self.random_state, **(self.extra or {}))

    def _encode(self, X) -> list[tuple[int, ...]]:
        return [tuple(self.vocab_.encode(_tokens(s))) for s in X]

    def fit(self, X: Sequence, y: Sequence):
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
        if len(X) == 0:
            raise ValueError("cannot fit on an empty corpus")
        config = self._config()
        src = [_tokens(s) for s in X]
        tgt = [_tokens(t) for t in y]
        too_long = max(len(t) for t in tgt + src)
        if too_long > config.max_len:
            raise ValueError(f"a sentence has {too_long} tokens, max_len is {config.max_len}")
        order: dict[str, None] = {}
        for toks in src + tgt:
            for tok in toks:
                order.setdefault(tok, None)
        self.vocab_ = Vocab(order)
        pairs = [SequencePair(tuple(self.vocab_.encode(s)), tuple(self.vocab_.encode(t)))
                 for s, t in zip(src, tgt)]
        data = Dataset(pairs, self.vocab_)
        state = trainer.init_state(self.vocab_, config)
        trainer.pretrain_state(state, data, config)
        result = trainer.train(state, data, config)
        self.state_ = result.state
        self.history_ = result.metrics
        self.config_ = config
        return self

    def predict(self, X: Sequence) -> list[str]:
        """Decoded target sentences as whitespace-joined strings."""
        check_is_fitted(self, "state_")
        src = [list(s) for s in self._encode(X)]
        params = self.state_.forward
        lat = encode(params, src)
        dc = DecodeConfig(max_len=self.config_.max_len, beam_width=self.beam_width)
        out = beam_decode(params, lat, dc) if self.beam_width > 1 else greedy_decode(params, lat, dc)
        return [" ".join(self.vocab_.decode(seq)) for seq in out]

    def score(self, X: Sequence, y: Sequence) -> float:
        """Corpus BLEU of the predictions against ``y``."""
        hyps = [_tokens(h) for h in self.predict(X)]
        return bleu(hyps, [_tokens(t) for t in y])

    def mutual_information_bound(self, X: Sequence, n_samples: int = 256) -> float:
        """Relative variational bound E[log Q(S|T')] over the given sources."""
        check_is_fitted(self, "state_")
        fwd = NeuralConditional(self.state_.forward, self.config_.max_len)
        bwd = NeuralConditional(self.state_.backward, self.config_.max_len)
        rng = np.random.default_rng([self.random_state, 3])
        return variational_bound(self._encode(X), fwd, bwd, n_samples, rng).bound
