"""Pretraining, the alternating MMI/AMI schedules, evaluation and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, objective
from .autodiff import Tape
from .infometrics import InfoReport, NeuralConditional, info_report
from .lns import NoisePolicy, draw_delta, lns_objective_grad
from .objective import AmiConfig, BaselineState
from .seqmodel import (DecodeConfig, LatentState, ModelConfig, SeqModelParams, SequencePair, Vocab,
                       bound, encode, greedy_decode, sample)
from .tasks import Dataset
from .textmetrics import MetricsReport, metrics_report

log = logging.getLogger(__name__)

MODES = ("mle", "mmi", "ami")
METRIC_COLUMNS = ("step", "loss", "bound", "stderr", "dist1", "dist2", "ent4", "bleu", "backward_gap")
BOUND_COLUMNS = ("step", "mode", "bound", "stderr", "kl", "exact_mi")


class TrainingDiverged(RuntimeError):
    """A loss or parameter went non-finite; ``state`` is the last good state."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    mode: str = "ami"
    seed: int = 0
    # model
    hidden: int = 64
    embed: int = 32
    max_len: int = 8
    init_scale: float = 0.1
    # pretraining (plain SGD with step decay)
    pretrain_steps: int = 2000
    pretrain_lr: float = 1.0
    lr_decay: float = 0.95
    decay_start: int = 1000
    decay_every: int = 100
    max_grad_norm: float = 5.0
    batch_size: int = 32
    # adversarial / MMI phase schedule
    outer_iters: int = 50
    noise_steps: int = 20
    forward_steps: int = 50
    backward_steps: int = 100
    forward_lr: float = 0.1
    backward_lr: float = 0.1
    noise_lr: float = 0.1
    clip_bound: float = 0.01
    lam: float = 0.1
    samples_per_source: int = 1
    teacher_forcing_weight: float = 1.0
    reward_scale: float = 1.0
    use_lns: bool = True
    use_multiplier: bool = True
    hidden_noise: int = 0  # 0 -> hidden
    # evaluation
    eval_every: int = 5
    eval_samples: int = 256
    eval_pairs: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "ami" and not self.clip_bound > 0:
            raise ValueError("ami mode requires clip_bound > 0")
        active = {"mle": ("forward_steps",), "mmi": ("forward_steps", "backward_steps"),
                  "ami": ("forward_steps", "backward_steps")
                  + (("noise_steps",) if self.use_lns else ())}[self.mode]
        for name in active:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive in {self.mode} mode")
        if self.batch_size < 1 or self.eval_every < 1 or self.outer_iters < 0:
            raise ValueError("batch_size and eval_every must be positive, outer_iters nonnegative")

    def ami_config(self) -> AmiConfig:
        return AmiConfig(clip_bound=self.clip_bound, samples_per_source=self.samples_per_source,
                         teacher_forcing_weight=self.teacher_forcing_weight,
                         reward_scale=self.reward_scale, use_multiplier=self.use_multiplier,
                         max_len=self.max_len)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, embed=self.embed, hidden=self.hidden,
                           max_len=self.max_len)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a :class:`TrainConfig`."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        kind = fields[key].type
        try:
            if kind == "bool":
                if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(val)
                values[key] = val.lower() in ("true", "1", "yes")
            elif kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {val!r} for {key}") from None
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


@dataclass
class TrainState:
    forward: SeqModelParams
    backward: SeqModelParams
    noise: NoisePolicy
    vocab: Vocab
    rng: np.random.Generator
    forward_baseline: BaselineState = field(default_factory=BaselineState)
    noise_baseline: BaselineState = field(default_factory=BaselineState)
    counters: dict = field(default_factory=lambda: {"pretrain_forward": 0, "pretrain_backward": 0,
                                                    "outer": 0, "noise": 0, "forward": 0,
                                                    "backward": 0})

    def copy(self) -> "TrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return TrainState(self.forward.copy(), self.backward.copy(), self.noise.copy(), self.vocab,
                          rng, dataclasses.replace(self.forward_baseline),
                          dataclasses.replace(self.noise_baseline), dict(self.counters))


def init_state(vocab: Vocab, config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    mc = config.model_config(len(vocab))
    forward = SeqModelParams.init(mc, rng, config.init_scale)
    backward = SeqModelParams.init(mc, rng, config.init_scale)
    noise = NoisePolicy.init(2 * config.hidden, config.hidden_noise or config.hidden, rng,
                             config.init_scale, config.lam)
    return TrainState(forward, backward, noise, vocab, rng)


def _global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def sgd_update(weights: dict, grads: dict, lr: float, max_norm: float | None = None) -> dict:
    """Plain SGD with optional global-norm gradient clipping."""
    scale = 1.0
    if max_norm:
        norm = _global_norm(grads)
        if not math.isfinite(norm):
            raise TrainingDiverged("non-finite gradient")
        if norm > max_norm:
            scale = max_norm / norm
    return {k: w - (lr * scale) * grads[k] for k, w in weights.items()}


def _lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.decay_start:
        return cfg.pretrain_lr
    return cfg.pretrain_lr * cfg.lr_decay ** ((step - cfg.decay_start) // cfg.decay_every + 1)


def _batch(pairs: Sequence[SequencePair], size: int, rng: np.random.Generator):
    idx = rng.integers(0, len(pairs), size=min(size, len(pairs)))
    return [pairs[i] for i in idx]


def _swap(pairs):
    return [SequencePair(p.target, p.source) for p in pairs]


def pretrain(role: str, dataset: Dataset, config: TrainConfig, params: SeqModelParams | None = None,
             rng: np.random.Generator | None = None, steps: int | None = None,
             start_step: int = 0, losses: list | None = None) -> SeqModelParams:
    """MLE training of one network; the backward role trains on (T -> S) pairs."""
    if role not in ("forward", "backward"):
        raise ValueError("role must be 'forward' or 'backward'")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if params is None:
        params = SeqModelParams.init(config.model_config(len(dataset.vocab)), rng, config.init_scale)
    pairs = dataset.pairs if role == "forward" else _swap(dataset.pairs)
    steps = config.pretrain_steps if steps is None else steps
    for step in range(start_step, start_step + steps):
        batch = _batch(pairs, config.batch_size, rng)
        tape = Tape()
        loss = objective.mle_loss(bound(params, tape), batch)
        if not math.isfinite(float(loss.value)):
            raise TrainingDiverged(f"{role} pretraining loss is non-finite at step {step}", params)
        grads = tape.grad(loss)
        lr = _lr_at(step, config)
        if lr == 0:
            continue
        params = SeqModelParams(params.config, sgd_update(params.weights, grads, lr,
                                                          config.max_grad_norm))
        if losses is not None:
            losses.append(float(loss.value))
    return params


def pretrain_state(state: TrainState, dataset: Dataset, config: TrainConfig,
                   losses: dict | None = None) -> TrainState:
    for role in ("forward", "backward"):
        key = f"pretrain_{role}"
        done = state.counters[key]
        todo = config.pretrain_steps - done
        if todo <= 0:
            continue
        trace = [] if losses is not None else None
        try:
            params = pretrain(role, dataset, config, getattr(state, role), state.rng, todo, done,
                              trace)
        except TrainingDiverged as exc:
            # state still holds this role's parameters from before the failed run
            raise TrainingDiverged(str(exc), state) from None
        setattr(state, role, params)
        state.counters[key] = config.pretrain_steps
        if losses is not None:
            losses[role] = trace
    return state


@dataclass
class EvalResult:
    metrics: MetricsReport
    info: InfoReport
    backward_gap: float
    loss: float
    hypotheses: list

    def as_dict(self) -> dict:
        return {"metrics": self.metrics.as_dict(), "info": self.info.as_dict(),
                "backward_gap": self.backward_gap, "loss": self.loss}


def backward_gap(forward: SeqModelParams, backward: SeqModelParams, pairs, rng, cfg: AmiConfig) -> float:
    """Mean Q(S|T) on real pairs minus mean K(T') * Q(S|T') on forward samples."""
    src = [list(p.source) for p in pairs]
    tgt = [list(p.target) for p in pairs]
    lat = encode(forward, src)
    samples, _ = sample(forward, lat, rng, DecodeConfig(max_len=cfg.max_len))
    real = objective.bounded_score(objective.score_backward(backward, src, tgt).value, cfg.reward_scale)
    fake = objective.bounded_score(objective.score_backward(backward, src, samples).value,
                                   cfg.reward_scale)
    k = objective.multipliers(tgt, samples, forward.weights["emb"], True)
    return float(real.mean() - (k * fake).mean())


def evaluate(state: TrainState, dataset: Dataset, config: TrainConfig,
             rng: np.random.Generator | None = None) -> EvalResult:
    """Greedy-decode the split and compute text metrics, MI bound and backward gap."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    rng = rng if rng is not None else np.random.default_rng([config.seed, 7])
    pairs = dataset.pairs[:config.eval_pairs] if config.eval_pairs else dataset.pairs
    src = [list(p.source) for p in pairs]
    tgt = [list(p.target) for p in pairs]
    hyps = greedy_decode(state.forward, encode(state.forward, src), DecodeConfig(max_len=config.max_len))
    metrics = metrics_report(hyps, tgt, state.forward.weights["emb"])
    fwd = NeuralConditional(state.forward, config.max_len)
    bwd = NeuralConditional(state.backward, config.max_len)
    info = info_report(dataset.joint, fwd, bwd, config.eval_samples, rng,
                       sources=[p.source for p in dataset.pairs])
    gap = backward_gap(state.forward, state.backward, pairs, rng, config.ami_config())
    loss = float(objective.mle_loss(state.forward, pairs).value)
    return EvalResult(metrics, info, gap, loss, hyps)


def relative_bound(info: InfoReport) -> float:
    """Bound with H(S) removed: E[log Q(S|T')]."""
    return info.bound_estimate - (info.source_entropy or 0.0) if not info.relative else info.bound_estimate


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    bounds: list[dict]
    diagnostics: list[dict]
    clip_violations: int = 0
    max_backward_weight: list = field(default_factory=list)


def _check_finite(state: TrainState, what: str, last_good: TrainState):
    ok = state.forward.all_finite() and state.backward.all_finite() and all(
        np.all(np.isfinite(v)) for v in state.noise.weights.values())
    if not ok:
        raise TrainingDiverged(f"non-finite parameters after {what}", last_good)


def _noisy_samples(state: TrainState, batch, cfg: AmiConfig, use_lns: bool):
    src = [list(p.source) for p in batch]
    rows = np.repeat(np.arange(len(batch)), cfg.samples_per_source)
    lat = encode(state.forward, src).select(rows)
    if use_lns:
        delta = draw_delta(state.noise, lat.z.value, state.rng)
        lat = LatentState(lat.z.tape.constant(lat.z.value + delta), lat.memory, lat.mask)
    samples, _ = sample(state.forward, lat, state.rng, DecodeConfig(max_len=cfg.max_len))
    return samples, rows


def _eval_row(state: TrainState, eval_data: Dataset, config: TrainConfig, step: int):
    rng = np.random.default_rng([config.seed, 11, step])
    res = evaluate(state, eval_data, config, rng)
    m = res.metrics
    row = {"step": step, "loss": res.loss, "bound": res.info.bound_estimate,
           "stderr": res.info.bound_stderr, "dist1": m.dist1, "dist2": m.dist2, "ent4": m.ent4,
           "bleu": m.bleu, "backward_gap": res.backward_gap}
    brow = {"step": step, "mode": config.mode, "bound": res.info.bound_estimate,
            "stderr": res.info.bound_stderr, "kl": res.info.posterior_kl,
            "exact_mi": res.info.exact_mi}
    return row, brow


def train(state: TrainState, dataset: Dataset, config: TrainConfig, eval_data: Dataset | None = None,
          iterations: int | None = None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run outer iterations of the configured mode from a (pretrained) state.

    ami: [noise phase -> forward phase -> backward phase + clipping] per iteration.
    mmi: [forward phase -> backward phase], no noise, no adversarial term, no clipping.
    mle: teacher-forced forward updates only.
    """
    eval_data = eval_data or dataset
    acfg = config.ami_config()
    pairs = dataset.pairs
    iterations = config.outer_iters - state.counters["outer"] if iterations is None else iterations
    metrics, bounds, diags = [], [], []
    result = TrainResult(state, metrics, bounds, diags)

    def emit(rec):
        diags.append(rec)
        if on_step:
            on_step(rec)

    if config.mode == "ami":
        # project the pretrained backward net into the box so the invariant holds from step 0
        state.backward = objective.clip_weights(state.backward, config.clip_bound)
    if state.counters["outer"] == 0 and iterations > 0:
        r, b = _eval_row(state, eval_data, config, 0)
        metrics.append(r)
        bounds.append(b)
    for _ in range(iterations):
        last_good = state.copy()
        try:
            _outer_iteration(state, pairs, config, acfg, result, emit, last_good)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), last_good) from None
        outer = state.counters["outer"]
        if outer % config.eval_every == 0:
            r, b = _eval_row(state, eval_data, config, outer)
            metrics.append(r)
            bounds.append(b)
    return result


def _outer_iteration(state: TrainState, pairs, config: TrainConfig, acfg: AmiConfig,
                     result: TrainResult, emit, last_good: TrainState) -> None:
    outer = state.counters["outer"]
    if config.mode == "ami" and config.use_lns:
        for _ in range(config.noise_steps):
            batch = _batch(pairs, config.batch_size, state.rng)
            g, d = lns_objective_grad(state.noise, state.forward, state.backward, batch,
                                      state.rng, acfg, state.noise_baseline)
            state.noise = state.noise.with_weights(
                sgd_update(state.noise.weights, g, config.noise_lr, config.max_grad_norm))
            state.counters["noise"] += 1
            emit({"step": state.counters["noise"], "mode": "ami", "phase": "noise",
                  "reward_mean": d["reward_mean"], "delta_norm": d["delta_norm"]})
        _check_finite(state, "noise phase", last_good)
    for _ in range(config.forward_steps):
        batch = _batch(pairs, config.batch_size, state.rng)
        if config.mode == "mle":
            tape = Tape()
            loss = objective.mle_loss(bound(state.forward, tape), batch)
            g = tape.grad(loss)
            d = {"reward_mean": float("nan"), "reward_var": float("nan"),
                 "baseline": float("nan"), "k_mean": float("nan")}
        elif config.mode == "mmi":
            g, d = objective.mmi_forward_grad(state.forward, state.backward, batch, state.rng,
                                              acfg, state.forward_baseline)
        else:
            g, d = objective.reinforce_forward_grad(
                state.forward, state.backward, batch, state.noise if config.use_lns else None,
                state.forward_baseline, state.rng, acfg)
        state.forward = SeqModelParams(state.forward.config, sgd_update(
            state.forward.weights, g, config.forward_lr, config.max_grad_norm))
        state.counters["forward"] += 1
        emit({"step": state.counters["forward"], "mode": config.mode, "phase": "forward",
              "reward_mean": d["reward_mean"], "reward_var": d["reward_var"],
              "baseline": d["baseline"], "k_mean": d["k_mean"]})
    _check_finite(state, "forward phase", last_good)
    if config.mode != "mle":
        for _ in range(config.backward_steps):
            batch = _batch(pairs, config.batch_size, state.rng)
            if config.mode == "mmi":
                g, d = objective.mmi_backward_grad(state.forward, state.backward, batch,
                                                   state.rng, acfg)
                new = sgd_update(state.backward.weights, g, config.backward_lr,
                                 config.max_grad_norm)
                state.backward = SeqModelParams(state.backward.config, new)
                sat = 0.0
            else:
                samples, rows = _noisy_samples(state, batch, acfg, config.use_lns)
                g, d = objective.backward_ami_grad(state.forward, state.backward, batch,
                                                   samples, acfg, rows)
                new = sgd_update(state.backward.weights, g, config.backward_lr,
                                 config.max_grad_norm)
                state.backward = objective.clip_weights(
                    SeqModelParams(state.backward.config, new), config.clip_bound)
                sat = objective.clip_saturation(state.backward, config.clip_bound)
                peak = state.backward.max_abs()
                result.max_backward_weight.append(peak)
                if peak > config.clip_bound:
                    result.clip_violations += 1
            state.counters["backward"] += 1
            emit({"step": state.counters["backward"], "mode": config.mode, "phase": "backward",
                  "k_mean": d.get("k_mean", float("nan")), "clip_saturation": sat})
        _check_finite(state, "backward phase", last_good)
    state.counters["outer"] = outer + 1


# -- serialization -----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_jsonl(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def save_state(state: TrainState, path: str | Path, config: TrainConfig | None = None) -> None:
    tensors = {}
    for prefix, weights in (("forward/", state.forward.weights), ("backward/", state.backward.weights),
                            ("noise/", state.noise.weights)):
        tensors.update({prefix + k: v for k, v in weights.items()})
    cfg = state.forward.config
    meta = {
        "model": dataclasses.asdict(cfg),
        "vocab": state.vocab.content_tokens,
        "counters": state.counters,
        "baselines": {"forward": dataclasses.asdict(state.forward_baseline),
                      "noise": dataclasses.asdict(state.noise_baseline)},
        "lam": state.noise.lam,
        "rng": state.rng.bit_generator.state,
        "config": config.to_dict() if config else None,
    }
    Path(path).write_bytes(checkpoint.dumps((cfg.hidden, cfg.embed, cfg.vocab_size), tensors, meta))


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig | None]:
    header, tensors, meta = checkpoint.loads(Path(path).read_bytes())
    try:
        mc = ModelConfig(**meta["model"])
        if (mc.hidden, mc.embed, mc.vocab_size) != header:
            raise checkpoint.CheckpointError("header disagrees with stored model config")

        def part(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        noise_w = part("noise/")
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state = TrainState(SeqModelParams(mc, part("forward/")), SeqModelParams(mc, part("backward/")),
                           NoisePolicy(noise_w["W1"], noise_w["b1"], noise_w["W2"], meta["lam"]),
                           Vocab(meta["vocab"]), rng,
                           BaselineState(**meta["baselines"]["forward"]),
                           BaselineState(**meta["baselines"]["noise"]), dict(meta["counters"]))
        config = TrainConfig(**meta["config"]) if meta.get("config") else None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, checkpoint.CheckpointError):
            raise
        raise checkpoint.CheckpointError(f"inconsistent checkpoint contents: {exc}") from None
    return state, config
