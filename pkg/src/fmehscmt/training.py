"""Loss, optimizer, learning-rate schedule and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import ops
from .data import DatasetSplit, Sample, augment, images_labels
from .errors import ConfigError, ContractError, NumericalError
from .model import HSCMTNet
from .params import ParamStore
from .tensor import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_acc")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.85
    decay_every: int = 20
    weight_decay: float = 0.04
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    dropout: float = 0.3
    clip_norm: Optional[float] = 5.0
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("decay_every and batch_size must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr0 * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood computed through log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logits")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = -1.0 / n
    return ops.sum_all(ops.mul(ops.log_softmax(logits, axis=-1), onehot))


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay is applied only to parameters of kind ``"weight"`` (conv and linear
    kernels); biases, LayerNorm affines and relative-bias tables are exempt.
    """

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}
        self.decayed: List[str] = []

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        self.decayed = []
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter {p.name} {p.data.shape}")
            data = p.data
            if weight_decay and p.kind == "weight":
                data = data * (1.0 - lr * weight_decay)
                self.decayed.append(p.name)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(data.dtype)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.m:
            self.m[name] = np.array(state["m"][name], dtype=self.m[name].dtype)
            self.v[name] = np.array(state["v"][name], dtype=self.v[name].dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


@dataclass
class TrainState:
    """Everything needed to continue a run after ``epoch`` finished epochs."""

    epoch: int = 0
    optimizer: Optional[Adam] = None
    history: List[dict] = field(default_factory=list)
    best_val_acc: float = -1.0
    best_params: Optional[Dict[str, np.ndarray]] = None


def evaluate(net: HSCMTNet, samples: Sequence[Sample], batch_size: int = 32):
    """Eval-mode mean cross-entropy and accuracy."""
    if not samples:
        return float("nan"), float("nan")
    x, y = images_labels(samples)
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        out = net(x[i:i + batch_size].astype(net.dtype))
        total += float(cross_entropy(out.logits, y[i:i + batch_size]).data) * len(y[i:i + batch_size])
        correct += int((out.logits.data.argmax(axis=1) == y[i:i + batch_size]).sum())
    return total / len(x), correct / len(x)


def _batch_rng(seed: int, epoch: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, *keys])


def fit(net: HSCMTNet, data: DatasetSplit, cfg: TrainConfig,
        callbacks: Sequence[Callable[[dict, HSCMTNet, TrainState], None]] = (),
        state: Optional[TrainState] = None) -> TrainState:
    """Train ``net`` in place for the remaining epochs of ``cfg``.

    Shuffling, augmentation and dropout draw from streams keyed by
    (seed, epoch, index), so a run resumed from a saved ``state`` reproduces
    the uninterrupted run exactly.
    """
    if net.config.dropout != cfg.dropout:
        net.config.dropout = cfg.dropout
    state = state or TrainState()
    if state.optimizer is None:
        state.optimizer = Adam(net.store, cfg.beta1, cfg.beta2, cfg.eps)
    if state.best_params is None:
        state.best_params = net.store.state()
    opt = state.optimizer
    train = list(data.train)
    n = len(train)
    for epoch in range(state.epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = _batch_rng(cfg.seed, epoch, 0).permutation(n)
        loss_sum = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            batch = [augment(train[i], _batch_rng(cfg.seed, epoch, 1, int(i))) if cfg.augment
                     else train[i] for i in idx]
            x, y = images_labels(batch)
            tape = Tape()
            try:
                out = net(x.astype(net.dtype), tape=tape, training=True,
                          rng=_batch_rng(cfg.seed, epoch, 2, b))
                loss = cross_entropy(out.logits, y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericalError(f"loss is {value}")
                tape.backward(loss)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1} batch {b}: {exc}") from exc
            finally:
                tape.release()
            if cfg.clip_norm:
                clip_grad_norm(opt.params, cfg.clip_norm)
            opt.step(lr, cfg.weight_decay)
            loss_sum += value * len(idx)
        val_loss, val_acc = evaluate(net, data.val)
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": loss_sum / max(n, 1),
                  "val_loss": val_loss, "val_acc": val_acc}
        state.history.append(record)
        state.epoch = epoch + 1
        if val_acc > state.best_val_acc:
            state.best_val_acc = val_acc
            state.best_params = net.store.state()
        log.info("epoch %d lr %.3g train %.4f val %.4f acc %.4f", epoch + 1, lr,
                 record["train_loss"], val_loss, val_acc)
        for cb in callbacks:
            cb(record, net, state)
    return state


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_FIELDS[1:]])


def read_history_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
