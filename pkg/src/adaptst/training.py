"""Adam restricted to trainable parameters, warmup/inverse-sqrt schedule, SpecAugment, training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt

from . import tensor as T
from .batches import Example, collate, make_batches
from .evaluation import bleu_of
from .tensor import Parameter

log = logging.getLogger(__name__)


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    eta_max: PositiveFloat = 2e-3
    warmup_steps: PositiveInt = 200


def lr(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to ``eta_max``, then decay with the inverse square root of the step."""
    if step < 1:
        raise ValueError("step counter starts at 1")
    return cfg.eta_max * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str) -> None:
        super().__init__(f"non-finite gradient in {path}; step aborted")
        self.path = path


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, log_records: list[dict]) -> None:
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.log = log_records


class Adam:
    """Bias-corrected Adam.  Moment buffers exist only for trainable parameters."""

    def __init__(
        self,
        params: Sequence[Parameter],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-9,
        max_grad_norm: float | None = None,
    ) -> None:
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.m = {p.path: np.zeros_like(p.data) for p in self.params}
        self.v = {p.path: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def state_size(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())

    def step(self, lr_now: float) -> None:
        grads = {}
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NonFiniteGradientError(p.path)
            grads[p.path] = g
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / (norm + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = grads[p.path]
            m, v = self.m[p.path], self.v[p.path]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = (lr_now / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.tensor.data -= upd.astype(p.data.dtype, copy=False)


def adam_step(params: Sequence[Parameter], state: Adam, lr_now: float) -> Adam:
    """Functional entry point: one update of ``state`` over ``params`` (frozen ones are skipped)."""
    wanted = {p.path for p in params if p.trainable}
    if wanted != {p.path for p in state.params}:
        raise ValueError("optimizer state does not match the trainable parameter set")
    state.step(lr_now)
    return state


class SpecAugmentPolicy(BaseModel):
    """Frequency/time masking; defaults are the LibriSpeech-basic values without time warp."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    freq_mask_max: int = 27
    n_freq_masks: int = 1
    time_mask_max: int = 100
    n_time_masks: int = 1


def spec_augment(frames: np.ndarray, policy: SpecAugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero ``n_freq_masks`` feature bands and ``n_time_masks`` time spans of random width."""
    out = np.array(frames, copy=True)
    T_len, F = out.shape
    for _ in range(policy.n_freq_masks):
        w = min(int(rng.integers(0, policy.freq_mask_max + 1)), F)
        f0 = int(rng.integers(0, F - w + 1))
        out[:, f0 : f0 + w] = 0.0
    for _ in range(policy.n_time_masks):
        w = min(int(rng.integers(0, policy.time_mask_max + 1)), T_len)
        t0 = int(rng.integers(0, T_len - w + 1))
        out[t0 : t0 + w, :] = 0.0
    return out


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    batch_size: PositiveInt = 32
    max_steps: PositiveInt = 1000
    eval_every: PositiveInt = 100
    patience: int | None = None
    seed: int = 0
    spec_augment: SpecAugmentPolicy | None = None
    max_grad_norm: float | None = None
    bleu_at_eval: bool = False
    max_decode_len: int = 24
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    select_by: Literal["loss", "bleu", "last"] = "loss"


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_dev_loss: float = math.inf
    best_score: float = math.inf
    steps: int = 0
    optimizer_state_size: int = 0
    trainable_size: int = 0


def _batch_loss(model, batch):
    return model.loss(batch.src, batch.src_len, batch.dec_in, batch.dec_out, batch.lang)


def dev_loss(model, examples: Sequence[Example], batch_size: int = 64) -> float:
    """Token-weighted mean cross-entropy over ``examples``."""
    was = model.training
    model.eval()
    total, n_tok = 0.0, 0
    try:
        with T.no_grad():
            for chunk in make_batches(list(examples), batch_size, np.random.default_rng(0), by_language=True):
                b = collate(chunk)
                k = int((b.dec_out != 0).sum())
                total += float(_batch_loss(model, b).data) * k
                n_tok += k
    finally:
        model.training = was
    return total / max(n_tok, 1)


def decode_examples(model, examples: Sequence[Example], max_len: int = 24, batch_size: int = 64) -> list[list[int]]:
    """Greedy hypotheses in the order of ``examples``."""
    hyps: list[list[int] | None] = [None] * len(examples)
    order = sorted(range(len(examples)), key=lambda i: (str(examples[i].lang), examples[i].start, examples[i].src_len, i))
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        # split further so that every decode batch shares adapter language and start token
        groups: dict = {}
        for i in idx:
            groups.setdefault((examples[i].lang, examples[i].start), []).append(i)
        for (lang, start), members in groups.items():
            b = collate([examples[i] for i in members])
            out = model.greedy_decode(b.src, b.src_len, lang, max_len=max_len, start_id=start)
            for i, h in zip(members, out):
                hyps[i] = h
    return hyps  # type: ignore[return-value]


def dev_bleu(model, examples: Sequence[Example], max_len: int = 24) -> float:
    hyps = decode_examples(model, examples, max_len)
    return bleu_of(hyps, [e.target for e in examples])


def train(
    model,
    plan,
    train_examples: Sequence[Example],
    dev_examples: Sequence[Example] = (),
    schedule: ScheduleConfig = ScheduleConfig(),
    cfg: TrainConfig = TrainConfig(),
    log_path=None,
) -> TrainResult:
    """Run Adam over ``plan.trainable_paths`` and restore the best dev-set weights.

    "Best" is the lowest dev loss, or the highest dev BLEU when ``cfg.select_by``
    is ``"bleu"``; ties keep the earlier evaluation.  ``"last"`` keeps the final weights.

    Batches come from ``make_batches`` (one adapter language per batch).
    Evaluation runs every ``cfg.eval_every`` steps and after the last step;
    ``cfg.patience`` evaluations without improvement stop training early.
    """
    if not train_examples:
        raise ValueError("training set is empty")
    trainable = set(plan.trainable_paths)
    for path, prm in model.params.items():
        prm.trainable = path in trainable
    opt = Adam(
        [model.params[p] for p in model.params if p in trainable],
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.max_grad_norm,
    )
    batch_rng = np.random.default_rng([cfg.seed, 11])
    aug_rng = np.random.default_rng([cfg.seed, 12])
    model.train(np.random.default_rng([cfg.seed, 13]))
    result = TrainResult(optimizer_state_size=opt.state_size(), trainable_size=sum(model.params[p].size for p in trainable))
    best_state = model.state_dict(trainable)
    sink = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        result.log.append(rec)
        if sink:
            sink.write(json.dumps(rec, sort_keys=True) + "\n")

    def evaluate(step):
        if not dev_examples:
            return False
        dl = dev_loss(model, dev_examples)
        rec = {"step": step, "lr": lr(max(step, 1), schedule), "loss": dl, "split": "dev"}
        if cfg.bleu_at_eval or cfg.select_by == "bleu":
            rec["bleu"] = dev_bleu(model, dev_examples, cfg.max_decode_len)
        emit(rec)
        model.train()
        score = {"loss": dl, "bleu": -rec.get("bleu", 0.0), "last": -float(step)}[cfg.select_by]
        if score < result.best_score:
            result.best_score, result.best_dev_loss, result.best_step = score, dl, step
            best_state.update(model.state_dict(trainable))
            return True
        return False

    step = 0
    stale = 0
    stop = False
    try:
        evaluate(0)
        while step < cfg.max_steps and not stop:
            for chunk in make_batches(list(train_examples), cfg.batch_size, batch_rng, by_language=True):
                if step >= cfg.max_steps:
                    break
                step += 1
                if cfg.spec_augment is not None and chunk[0].src.ndim == 2:
                    chunk = [
                        Example(spec_augment(e.src, cfg.spec_augment, aug_rng), e.target, e.start, e.lang) for e in chunk
                    ]
                batch = collate(chunk)
                loss = _batch_loss(model, batch)
                value = float(loss.data)
                if not math.isfinite(value):
                    model.load_state_dict(best_state, strict=False)
                    raise NonFiniteLossError(step, result.log)
                T.backward(loss)
                rate = lr(step, schedule)
                opt.step(rate)
                model.zero_grad()
                emit({"step": step, "lr": rate, "loss": value, "split": "train"})
                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    if evaluate(step):
                        stale = 0
                    else:
                        stale += 1
                        if cfg.patience is not None and stale >= cfg.patience:
                            stop = True
                            break
    finally:
        if sink:
            sink.close()
        model.eval()
    result.steps = step
    if dev_examples:
        model.load_state_dict(best_state, strict=False)
    return result


def grid_search(run: Callable[[float], TrainResult], etas: Sequence[float] = (2e-3, 2e-4, 2e-5)):
    """Run ``run(eta)`` per peak rate and keep the best dev score; ties go to the smallest rate."""
    results = {eta: run(eta) for eta in etas}
    best = min(results, key=lambda e: (results[e].best_score, e))
    return best, results
