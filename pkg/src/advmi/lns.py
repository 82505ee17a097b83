"""Latent noise sampling: a learned perturbation of the encoder state.

    mu(z)    = W2 @ relu(W1 @ z + b1)
    sigma(z) = softplus(mu(z))
    delta    = mu + eps * sigma,   eps ~ N(0, I)
    z~       = z + delta

The policy is trained to maximise ``lam * ||delta||_2 + E[Q(S|T')]`` with
T' sampled from the forward model decoding from ``z~``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .objective import AmiConfig, BaselineState, bounded_score, score_backward
from .seqmodel import LatentState, SeqModelParams, SequencePair, bind, encode, log_prob, sample, \
    DecodeConfig

NAMES = ("W1", "b1", "W2")


@dataclass
class NoisePolicy:
    W1: np.ndarray  # (hidden_noise, latent_dim)
    b1: np.ndarray  # (hidden_noise,)
    W2: np.ndarray  # (latent_dim, hidden_noise)
    lam: float = 0.1

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        hn, d = self.W1.shape
        if self.b1.shape != (hn,) or self.W2.shape != (d, hn):
            raise ValueError(f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} "
                             f"W2{self.W2.shape}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")

    @property
    def latent_dim(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, latent_dim: int, hidden_noise: int | None = None,
             rng: np.random.Generator | None = None, scale: float = 0.1, lam: float = 0.1):
        hn = hidden_noise or latent_dim // 2
        rng = rng or np.random.default_rng(0)
        return cls(rng.uniform(-scale, scale, (hn, latent_dim)), np.zeros(hn),
                   rng.uniform(-scale, scale, (latent_dim, hn)), lam)

    @classmethod
    def zeros(cls, latent_dim: int, hidden_noise: int | None = None, lam: float = 0.1):
        hn = hidden_noise or latent_dim // 2
        return cls(np.zeros((hn, latent_dim)), np.zeros(hn), np.zeros((latent_dim, hn)), lam)

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2}

    def with_weights(self, weights: dict[str, np.ndarray]) -> "NoisePolicy":
        return NoisePolicy(weights["W1"], weights["b1"], weights["W2"], self.lam)

    def copy(self) -> "NoisePolicy":
        return self.with_weights({k: v.copy() for k, v in self.weights.items()})

    def bind(self, tape: Tape, prefix: str = "") -> dict[str, Tensor]:
        return {k: tape.variable(v, name=prefix + k) for k, v in self.weights.items()}


def noise_params(policy, z):
    """(mu, sigma) for latent ``z`` of shape (2H,) or (B, 2H).

    ``policy`` is a :class:`NoisePolicy` (numpy in, numpy out) or a dict of
    bound tensors (tensor in, tensor out).
    """
    if isinstance(policy, NoisePolicy):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != policy.latent_dim:
            raise ValueError(f"latent has {z.shape[-1]} dims, policy expects {policy.latent_dim}")
        mu = np.maximum(z @ policy.W1.T + policy.b1, 0.0) @ policy.W2.T
        return mu, ad._softplus(mu)
    if z.shape[-1] != policy["W1"].shape[1]:
        raise ValueError(f"latent has {z.shape[-1]} dims, policy expects {policy['W1'].shape[1]}")
    mu = ad.relu(z @ policy["W1"].T + policy["b1"]) @ policy["W2"].T
    return mu, ad.softplus(mu)


def sample_delta(mu, sigma, rng: np.random.Generator | None = None, eps=None):
    """Reparameterised draw ``mu + eps * sigma``; returns (delta, eps)."""
    shape = mu.shape
    if eps is None:
        eps = rng.standard_normal(shape)
    eps = np.asarray(eps, dtype=np.float64)
    if isinstance(mu, Tensor):
        return mu + sigma * eps, eps
    return mu + eps * sigma, eps


def draw_delta(policy: NoisePolicy, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mu, sigma = noise_params(policy, z)
    return sample_delta(mu, sigma, rng)[0]


def perturb(latent: LatentState, delta) -> LatentState:
    """Shift only ``z``; the attention memory is left untouched."""
    if delta.shape[-1] != latent.z.shape[-1] or delta.shape != latent.z.shape:
        raise ValueError(f"delta shape {delta.shape} does not match z shape {latent.z.shape}")
    if isinstance(delta, Tensor):
        return LatentState(latent.z + delta, latent.memory, latent.mask)
    return LatentState(latent.z + latent.z.tape.constant(delta), latent.memory, latent.mask)


def lns_objective_grad(policy: NoisePolicy, forward: SeqModelParams, backward: SeqModelParams,
                       pairs: Sequence[SequencePair], rng: np.random.Generator, config: AmiConfig,
                       baseline: BaselineState | None = None):
    """Loss gradients for (W1, b1, W2); the networks are held fixed.

    The norm term is differentiated pathwise through the reparameterisation,
    the expected backward score by REINFORCE through the dependence of the
    sampling distribution on ``z~``.
    """
    src = [list(p[0]) for p in pairs]
    rows = np.repeat(np.arange(len(pairs)), config.samples_per_source)
    tape = Tape()
    pol = policy.bind(tape)
    fw = bind(forward, tape)
    with_grad = encode(forward, src)  # numpy-only pass; the encoder is constant here
    z = tape.constant(with_grad.z.value[rows])
    memory = tape.constant(with_grad.memory.value[rows])
    mask = with_grad.mask[rows]
    mu, sigma = noise_params(pol, z)
    delta, _ = sample_delta(mu, sigma, rng)
    norms = ad.l2norm(delta, axis=1)
    objective = norms.mean() * policy.lam
    lat = LatentState(z + delta, memory, mask)
    samples, _ = sample(forward, lat.detached(), rng, DecodeConfig(max_len=config.max_len))
    s_rep = [src[i] for i in rows]
    q = bounded_score(score_backward(backward, s_rep, samples).value, config.reward_scale)
    b = 0.0 if baseline is None else baseline.current(q)
    if baseline is not None:
        baseline.update(q)
    adv = q - b
    if np.any(adv != 0):
        lp = log_prob(fw, lat, samples, config.max_len)
        objective = objective + (lp * adv).sum() / len(samples)
    grads = tape.grad(-objective)
    # Monte Carlo value of lam * ||delta|| + Q, not the surrogate differentiated above
    value = policy.lam * float(norms.value.mean()) + float(q.mean())
    diag = {"delta_norm": float(norms.value.mean()), "reward_mean": float(q.mean()),
            "objective": value}
    return grads, diag
