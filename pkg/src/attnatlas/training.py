"""Masked-token pretraining, fine-tuning with Adam, and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from attnatlas.encoder import (
    NO_ABLATION,
    AblationSpec,
    Checkpoint,
    ModelConfig,
    copy_params,
    forward,
    init_params,
    loss_grads_forward,
)
from attnatlas.errors import NumericalError, ShapeError
from attnatlas.numerics import Rng
from attnatlas.tasks import (
    SyntheticGrammar,
    generate_pair_task,
    mask_tokens,
    metric,
)


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 32
    epochs: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate and adam_eps must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("Adam betas must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, hyper: Hyperparams):
    """One bias-corrected Adam update. Returns new ``(params, state)``."""
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} does not match the parameters")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}")
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_params[name] = p - hyper.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + hyper.adam_eps)
    return new_params, AdamState(new_m, new_v, t)


class TrainingLog:
    """CSV ``step,loss,metric``; rows buffered and flushed once per epoch."""

    def __init__(self, path=None):
        self.rows: list[tuple] = []
        self._fh = open(path, "w", newline="", encoding="utf-8") if path else None
        self._writer = csv.writer(self._fh) if self._fh else None
        if self._writer:
            self._writer.writerow(["step", "loss", "metric"])

    def add(self, step: int, loss: float, value: float) -> None:
        self.rows.append((step, loss, value))
        if self._writer:
            self._writer.writerow([step, repr(float(loss)), repr(float(value))])

    def flush(self) -> None:
        if self._fh:
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.shuffle(list(range(n)))
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train(config, params, items, hyper, loss_fn, log, tag):
    """Shared minibatch loop. ``loss_fn(params, item) -> (loss, grads, correct, total)``."""
    state = AdamState()
    step = 0
    for epoch in range(hyper.epochs):
        rng = Rng(hyper.seed).spawn(1000 + epoch)
        for batch in _batches(len(items), hyper.batch_size, rng):
            total_grads = None
            total_loss = 0.0
            correct = counted = 0
            for idx in batch:
                loss, grads, c, n = loss_fn(params, items[idx], step, idx)
                total_loss += loss
                correct += c
                counted += n
                if total_grads is None:
                    total_grads = grads
                else:
                    for k in total_grads:
                        total_grads[k] += grads[k]
            mean_loss = total_loss / len(batch)
            if not math.isfinite(mean_loss):
                raise NumericalError(f"{tag} diverged at step {step}: loss {mean_loss}")
            grads = {k: g / len(batch) for k, g in total_grads.items()}
            params, state = adam_step(params, grads, state, hyper)
            log.add(step, mean_loss, correct / max(counted, 1))
            step += 1
        log.flush()
    return params


def _mlm_loss_fn(config, hyper):
    def fn(params, example, step, idx):
        # fresh mask per (step, example), reproducible from the seed
        rng = Rng(hyper.seed).spawn(2_000_000 + step * 100_003 + idx)
        seq, targets, positions = mask_tokens(example, hyper.mask_rate, rng)
        loss, grads, res = loss_grads_forward(config, params, seq, "mlm", (positions, targets))
        pred = res.mlm_logits[positions].argmax(axis=1)
        return loss, grads, int((pred == np.asarray(targets)).sum()), len(targets)

    return fn


def pretraining_corpus(grammar: SyntheticGrammar, n: int, seed: int) -> list:
    """Sentence pairs whose second segment repeats the first in order.

    A masked token can then be recovered from its aligned copy, which is what
    makes the pretext useful for later pair tasks; shuffled or corrupted
    pairs leave the copy unreachable and pretraining stalls at guessing
    token roles.
    """
    aligned = dataclasses.replace(grammar, corruption_rate=0.0, shuffle_prob=0.0)
    return generate_pair_task(aligned, n, seed=seed)


def pretrain(config: ModelConfig, grammar: SyntheticGrammar, hyper: Hyperparams,
             n_examples: int = 8000, log_path=None, corpus=None) -> Checkpoint:
    """Masked-token pretraining on a generated corpus; returns a "pretrained" checkpoint."""
    if corpus is None:
        corpus = pretraining_corpus(grammar, n_examples, seed=hyper.seed + 17)
    params = init_params(config, hyper.seed)
    log = TrainingLog(log_path)
    try:
        params = _train(config, params, corpus, hyper, _mlm_loss_fn(config, hyper), log, "pretraining")
    finally:
        log.close()
    return Checkpoint(config, params, "pretrained")


def mlm_evaluate(ck: Checkpoint, dataset, mask_rate: float = 0.15, seed: int = 0):
    """Mean masked-token loss and accuracy with fixed, seeded masks."""
    losses, correct, total = [], 0, 0
    for i, ex in enumerate(dataset):
        seq, targets, positions = mask_tokens(ex, mask_rate, Rng(seed).spawn(i))
        logits = forward(ck.config, ck.params, seq, mlm=True).mlm_logits[positions]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        losses.append(-logp[np.arange(len(targets)), targets].mean())
        correct += int((logits.argmax(axis=1) == np.asarray(targets)).sum())
        total += len(targets)
    return float(np.mean(losses)), correct / total


def fine_tune(init, dataset, hyper: Hyperparams, eval_set=None, metric_kind: str = "accuracy",
              config: ModelConfig | None = None, log_path=None):
    """Train task head and encoder end to end.

    ``init`` is a :class:`Checkpoint` or an integer seed for a fresh random
    initialisation of every array, embeddings included (``config`` required).
    Returns ``(checkpoint, score)``; the score is on ``eval_set`` when given,
    otherwise on the training set.
    """
    if isinstance(init, Checkpoint):
        config = init.config
        params = copy_params(init.params)
    else:
        if config is None:
            raise ValueError("random initialisation needs a ModelConfig")
        params = init_params(config, int(init))

    def fn(params, example, step, idx):
        loss, grads, res = loss_grads_forward(config, params, example.seq, "task", example.label)
        pred = int(res.task_logits.argmax())
        return loss, grads, int(pred == example.label), 1

    log = TrainingLog(log_path)
    try:
        params = _train(config, params, list(dataset), hyper, fn, log, "fine-tuning")
    finally:
        log.close()
    ck = Checkpoint(config, params, "finetuned")
    score = evaluate(ck, eval_set if eval_set is not None else dataset, metric_kind)
    return ck, score


def predict(ck: Checkpoint, dataset, ablation: AblationSpec = NO_ABLATION) -> list[int]:
    return [int(forward(ck.config, ck.params, ex.seq, ablation).task_logits.argmax()) for ex in dataset]


def evaluate(ck: Checkpoint, dataset, metric_kind: str = "accuracy",
             ablation: AblationSpec = NO_ABLATION) -> float:
    """Metric of the task head over ``dataset`` with ``ablation`` applied."""
    return metric(metric_kind, predict(ck, dataset, ablation), [ex.label for ex in dataset])
