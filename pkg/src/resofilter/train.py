"""AdamW / SGD updates, the single-sample probe, and the mini-batch training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import numcore
from .errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def validate(self) -> "OptimizerConfig":
        if self.kind not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    shuffle: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self


class Optimizer:
    """Holds moment estimates; ``update`` returns the additive step for each parameter."""

    def __init__(self, opt: OptimizerConfig):
        self.opt = opt.validate()
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: M.ParamStore, grads: M.ParamStore) -> dict[str, np.ndarray]:
        o = self.opt
        self.t += 1
        deltas = {}
        if o.kind == "sgd":
            for name, w in params.items():
                d = -o.lr * grads[name]
                if o.weight_decay:
                    d = d - o.lr * o.weight_decay * w
                deltas[name] = d
            return deltas

        bc1 = 1.0 - o.beta1 ** self.t
        bc2 = 1.0 - o.beta2 ** self.t
        for name, w in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - o.beta1) * g if m is None else o.beta1 * m + (1 - o.beta1) * g
            v = (1 - o.beta2) * g * g if v is None else o.beta2 * v + (1 - o.beta2) * g * g
            self.m[name], self.v[name] = m, v
            d = -o.lr * (m / bc1) / (np.sqrt(v / bc2) + o.eps)
            if o.weight_decay:
                # decoupled decay, applied to the pre-step weights
                d = d - o.lr * o.weight_decay * w
            deltas[name] = d
        return deltas

    def step(self, params: M.ParamStore, grads: M.ParamStore) -> dict[str, np.ndarray]:
        deltas = self.update(params, grads)
        for name, d in deltas.items():
            params.params[name] = params.params[name] + d
        return deltas


def probe(base: M.ParamStore, sample, opt: OptimizerConfig, steps: int = 1):
    """Fine-tune a private copy of ``base`` on one sample from fresh optimizer state.

    Returns ``(loss at base, tuned params, applied update)``. The update is the
    sum of optimizer steps, i.e. tuned - base without the cancellation error of
    subtracting two nearly equal weights.
    """
    if steps < 1:
        raise ConfigError("probe steps must be >= 1")
    tuned = base.copy()
    optim = Optimizer(opt)
    total = None
    first_loss = None
    for _ in range(steps):
        loss, grads = M.loss_and_grads(tuned, sample.token_ids, sample.loss_mask)
        if first_loss is None:
            first_loss = loss
        deltas = optim.step(tuned, grads)
        total = deltas if total is None else {k: total[k] + d for k, d in deltas.items()}
    return first_loss, tuned, total


def probe_step(base: M.ParamStore, sample, opt: OptimizerConfig, steps: int = 1) -> M.ParamStore:
    return probe(base, sample, opt, steps)[1]


def _batches(n: int, tc: TrainConfig, epoch: int):
    order = np.arange(n)
    if tc.shuffle:
        order = numcore.make_rng(tc.seed + epoch).permutation(n)
    for s in range(0, n, tc.batch_size):
        yield order[s:s + tc.batch_size]


def train(base: M.ParamStore, data, opt: OptimizerConfig, tc: TrainConfig,
          log: list | None = None) -> M.ParamStore:
    """Mini-batch training; the batch gradient is the mean of per-sample gradients.

    With ``shuffle=False`` batches follow the given data order. When ``log`` is a
    list, one ``{"step", "epoch", "loss"}`` record per update is appended.
    """
    tc.validate()
    data = list(data)
    if not data:
        raise ConfigError("training data is empty")
    params = base.copy()
    optim = Optimizer(opt)
    step = 0
    for epoch in range(tc.epochs):
        for batch in _batches(len(data), tc, epoch):
            acc = None
            loss_sum = 0.0
            for i in batch:
                loss, g = M.loss_and_grads(params, data[i].token_ids, data[i].loss_mask)
                loss_sum += loss
                if acc is None:
                    acc = g.params
                else:
                    for name in acc:
                        acc[name] += g.params[name]
            n = len(batch)
            grads = M.ParamStore(params.config, {k: v / n for k, v in acc.items()})
            optim.step(params, grads)
            step += 1
            if log is not None:
                log.append({"step": step, "epoch": epoch, "loss": loss_sum / n})
    return params


def eval_loss(params: M.ParamStore, data) -> float:
    """Mean over samples of each sample's masked cross-entropy."""
    data = list(data)
    if not data:
        raise ConfigError("evaluation data is empty")
    # fsum is correctly rounded, so a duplicated dataset gives the identical mean
    return math.fsum(M.loss(params, s.token_ids, s.loss_mask) for s in data) / len(data)
