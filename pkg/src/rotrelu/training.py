"""Optimizers, learning-rate schedules and the training procedures.

Three procedures are provided: :func:`train` (from scratch or from a warm
start, all parameters trainable), :func:`train_slopes_only` (weights frozen at
their initial values, only RReLU slopes learn) and :func:`two_step_coarse`
(slopes-only, prune, then full retraining of the compacted network).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Dataset, augment, iterate_batches
from .errors import ContractError, DivergenceError, InputError
from .models import Model, param_group

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 128
    optimizer: str = "sgd"  # sgd | adam
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = False
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    scheduler: str = "multistep"  # multistep | cosine | constant
    milestones: Tuple[int, ...] = ()
    decay: float = 0.1
    lr_min: float = 0.0
    seed: int = 0
    freeze_weights: bool = False
    augment: str = "none"
    hist_every: int = 0
    hist_bins: int = 50

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ContractError("learning rate must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ContractError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("multistep", "cosine", "constant"):
            raise ContractError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float = float("nan")
    phase: str = "train"


@dataclass
class RunLog:
    records: List[EpochRecord] = field(default_factory=list)
    initial_val_acc: float = float("nan")
    slope_snapshots: Dict[int, np.ndarray] = field(default_factory=dict)

    def extend(self, other: "RunLog") -> None:
        self.records.extend(other.records)
        base = max(self.slope_snapshots, default=0)
        for k, v in other.slope_snapshots.items():
            self.slope_snapshots[base + k] = v

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc", "phase"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_acc), repr(r.val_acc), r.phase])


def schedule_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 0-based ``epoch``."""
    if cfg.scheduler == "constant":
        return cfg.lr
    if cfg.scheduler == "multistep":
        passed = sum(1 for m in cfg.milestones if epoch >= m)
        return cfg.lr * cfg.decay ** passed
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


class SGD:
    def __init__(self, momentum=0.9, nesterov=False):
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params, grads, lr, decay):
        for name, g in grads.items():
            p = params[name]
            if decay.get(name):
                g = g + decay[name] * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            upd = g + self.momentum * v if self.nesterov else v
            p -= (lr * upd).astype(p.dtype)


_FLUSH = 1e-30  # moments below this cannot move a parameter measurably


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr, decay):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if decay.get(name):
                g = g + decay[name] * p
            g = np.asarray(g, dtype=p.dtype)
            if name not in self.m:
                self.m[name], self.v[name] = np.zeros_like(p), np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            # in place: these run once per batch on every parameter
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            tmp = np.multiply(g, g)
            tmp *= 1 - self.b2
            v += tmp
            # parameters with zero gradient decay their moments into the subnormal
            # range, where float arithmetic is an order of magnitude slower
            np.abs(m, out=tmp)
            np.copyto(m, 0, where=tmp < _FLUSH)
            np.copyto(v, 0, where=v < _FLUSH)
            np.sqrt(v, out=tmp)
            tmp *= 1 / np.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / c1
            p -= tmp


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.betas, cfg.adam_eps)
    return SGD(cfg.momentum, cfg.nesterov)


def evaluate(model: Model, ds: Dataset, batch_size: int = 1000) -> float:
    """Eval-mode accuracy in percent."""
    if len(ds) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    pred = model.predict(ds.images, batch_size)
    return 100.0 * float(np.mean(pred == ds.labels))


def trainable_names(model: Model, slopes_only: bool = False, freeze_weights: bool = False) -> List[str]:
    names = []
    for name in model.params:
        group = param_group(model.spec, name)
        if slopes_only or freeze_weights:
            if group == "slope":
                names.append(name)
        else:
            names.append(name)
    return names


def _run(model: Model, train_set: Dataset, cfg: TrainConfig, names: Sequence[str],
         val_set: Optional[Dataset], phase: str) -> Tuple[Model, RunLog]:
    if len(train_set) == 0:
        raise InputError("training set is empty")
    opt = make_optimizer(cfg)
    decay = {n: cfg.weight_decay for n in names if param_group(model.spec, n) == "weight"}
    log = RunLog()
    if val_set is not None:
        log.initial_val_acc = evaluate(model, val_set)
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg, epoch)
        tot_loss, correct, seen = 0.0, 0, 0
        batch_seed = np.random.default_rng([cfg.seed, epoch])
        for bi, (xb, yb) in enumerate(iterate_batches(train_set, cfg.batch_size, seed=batch_seed)):
            if cfg.augment != "none":
                xb = augment(xb, cfg.augment, seed=[cfg.seed, epoch, bi])
            logits, leaves = model.forward_graph(xb, train=True, trainable=names)
            loss = T.softmax_cross_entropy(logits, yb)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise DivergenceError(epoch + 1)
            T.backward(loss)
            grads = {n: t.grad for n, t in leaves.items() if t.grad is not None}
            opt.step(model.params, grads, lr, decay)
            tot_loss += lval * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
        rec = EpochRecord(epoch + 1, lr, tot_loss / seen, 100.0 * correct / seen, phase=phase)
        if val_set is not None:
            rec.val_acc = evaluate(model, val_set)
        log.records.append(rec)
        if cfg.hist_every and (epoch + 1) % cfg.hist_every == 0 and model.spec.rrelu_layers():
            log.slope_snapshots[epoch + 1] = np.concatenate([s.copy() for s in model.slopes().values()])
        logger.info("%s epoch %d lr %.4g loss %.4f acc %.2f val %.2f", phase, rec.epoch, lr,
                    rec.train_loss, rec.train_acc, rec.val_acc)
    return model, log


def train(model: Model, train_set: Dataset, cfg: TrainConfig,
          val_set: Optional[Dataset] = None) -> Tuple[Model, RunLog]:
    """Minimize cross-entropy over weights, slopes and BN affine parameters (in place).

    With ``cfg.freeze_weights`` only the slopes are updated.
    """
    names = trainable_names(model, freeze_weights=cfg.freeze_weights)
    return _run(model, train_set, cfg, names, val_set, "train")


def train_slopes_only(model: Model, train_set: Dataset, cfg: TrainConfig,
                      val_set: Optional[Dataset] = None) -> Tuple[Model, RunLog]:
    """Update only RReLU slopes; BN running statistics still track the batches."""
    if not model.spec.rrelu_layers():
        raise ContractError("slopes-only training needs a model with RReLU layers")
    names = trainable_names(model, slopes_only=True)
    return _run(model, train_set, cfg, names, val_set, "slopes")


def two_step_coarse(model: Model, train_set: Dataset, cfg1: TrainConfig, cfg2: TrainConfig,
                    gamma: float, val_set: Optional[Dataset] = None) -> Tuple[Model, RunLog]:
    """Slopes-only training, pruning at ``gamma``, then full training of the smaller net."""
    from .pruning import compact, derive_mask

    model, log = train_slopes_only(model, train_set, cfg1, val_set)
    mask = derive_mask(model, gamma)
    pruned = compact(model, mask)
    pruned, log2 = train(pruned, train_set, cfg2, val_set)
    log.extend(log2)
    return pruned, log
