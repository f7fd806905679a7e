"""Teacher-forced training of the backbone and draft head with Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import RecModel
from .params import ParamStore

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite loss {value} at batch example {index}")
        self.index = index


@dataclass(frozen=True)
class TrainingExample:
    query: tuple
    history: tuple  # of semantic ids
    target: tuple

    def __post_init__(self):
        object.__setattr__(self, "query", tuple(int(q) for q in self.query or ()))
        object.__setattr__(self, "history", tuple(tuple(int(t) for t in h) for h in self.history))
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))


@dataclass
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    clip_norm: float = 1.0
    head_weight: float = 1.0
    lm_weight: float = 1.0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class StepStats:
    loss: float
    head_loss: float
    lm_loss: float
    grad_norm: float


class Adam:
    def __init__(self, store: ParamStore, lr=2e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store, self.lr, self.beta1, self.beta2, self.eps = store, lr, beta1, beta2, eps
        self.t = 0

    def step(self, names: Sequence[str] | None = None) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in names if names is not None else self.store:
            p = self.store.param(name)
            if p.m is None:
                p.m = np.zeros_like(p.value)
                p.v = np.zeros_like(p.value)
            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * p.grad
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in store.items())))
    if max_norm and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in store.items():
            p.grad *= scale
    return total


def encode_batch(model: RecModel, batch: Sequence[TrainingExample]):
    """Group a batch by prompt length; yields ``(indices, prompts, lm_inputs, targets)``."""
    groups: dict[int, list[int]] = {}
    prompts, lm_inputs = [], []
    for i, ex in enumerate(batch):
        p = model.prompt(ex.history, ex.query)
        prompts.append(p)
        lm_inputs.append(model.prompt(ex.history, ex.query, placeholders=False, prefix=ex.target))
        groups.setdefault(len(p), []).append(i)
    for n in sorted(groups):
        idx = groups[n]
        yield (
            idx,
            np.stack([prompts[i] for i in idx]),
            np.stack([lm_inputs[i] for i in idx]),
            np.asarray([batch[i].target for i in idx], dtype=np.int64),
        )


def _frozen_names(model: RecModel, cfg: TrainConfig) -> list[str]:
    if not cfg.freeze_backbone:
        return list(model.store)
    return [k for k in model.store if k.startswith(("head.", "code_emb.", "trans."))]


def step_stats(batch, model: RecModel, optimizer: Adam, cfg: TrainConfig) -> StepStats:
    store = model.store
    store.zero_grad()
    B = len(batch)
    head_loss = lm_loss = 0.0
    for idx, prompts, lm_inputs, targets in encode_batch(model, batch):
        w = len(idx) / B
        h, m = model.loss_and_grad(
            prompts, lm_inputs, targets,
            head_weight=cfg.head_weight * w,
            lm_weight=cfg.lm_weight * w,
            train_backbone=not cfg.freeze_backbone,
        )
        head_loss += h * w
        lm_loss += m * w
    loss = cfg.head_weight * head_loss + cfg.lm_weight * lm_loss
    if not np.isfinite(loss):
        store.zero_grad()
        bad = _first_bad_example(batch, model)
        raise NonFiniteLossError(bad, loss)
    norm = clip_grad_norm(store, cfg.clip_norm)
    optimizer.step(_frozen_names(model, cfg))
    return StepStats(loss, head_loss, lm_loss, norm)


def train_step(batch, model: RecModel, optimizer: Adam, cfg: TrainConfig) -> float:
    """One Adam step on ``batch``; returns the loss measured before the update."""
    return step_stats(batch, model, optimizer, cfg).loss


def _first_bad_example(batch, model: RecModel) -> int:
    for i, ex in enumerate(batch):
        p = model.prompt(ex.history, ex.query)[None]
        hidden = model.backbone.forward(p, keep_cache=False)
        nll = model.head.forward_train(hidden[:, -model.L - 1:], np.asarray([ex.target]))
        if not np.all(np.isfinite(nll)):
            return i
    return 0


def iter_batches(examples: Sequence[TrainingExample], batch_size: int, rng: np.random.Generator):
    """Shuffled minibatches whose members share one prompt length."""
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        n = len(ex.query) + sum(len(h) for h in ex.history)
        by_len.setdefault(n, []).append(i)
    batches = []
    for n in sorted(by_len):
        idx = np.asarray(by_len[n])
        rng.shuffle(idx)
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    for j in order:
        yield [examples[i] for i in batches[j]]


@dataclass
class Trainer:
    model: RecModel
    cfg: TrainConfig = field(default_factory=TrainConfig)
    history: list = field(default_factory=list)

    def __post_init__(self):
        c = self.cfg
        self.optimizer = Adam(self.model.store, c.lr, c.beta1, c.beta2, c.eps)
        self.rng = np.random.default_rng(c.seed)

    def fit(self, examples: Sequence[TrainingExample], epochs: int | None = None, callback=None):
        epochs = self.cfg.epochs if epochs is None else epochs
        for epoch in range(epochs):
            totals = np.zeros(3)
            count = 0
            for batch in iter_batches(examples, self.cfg.batch_size, self.rng):
                st = step_stats(batch, self.model, self.optimizer, self.cfg)
                totals += np.array([st.loss, st.head_loss, st.lm_loss]) * len(batch)
                count += len(batch)
                self.history.append(st)
            totals /= max(count, 1)
            log.info("epoch %d loss %.4f head %.4f lm %.4f", epoch + 1, *totals)
            if callback is not None:
                callback(epoch, totals)
        return self
