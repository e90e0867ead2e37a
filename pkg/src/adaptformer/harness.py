"""Training and evaluation loops: SGD with classic momentum, linear LR scaling,
linear warmup followed by cosine decay, and per-epoch metrics."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import subset_of
from .data import Dataset
from .tensor import NumericalError, Rng, Tensor
from .tuning import (
    AdapterConfig,
    ConfigError,
    FreezePolicy,
    PromptConfig,
)
from .vit import VitModel

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "lr", "train_loss", "eval_top1", "tunable_params", "wall_ms")


class TrainingAborted(NumericalError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_epochs: int = 2
    total_epochs: int = 20
    seed: int = 0
    tuning_mode: str = "adaptformer"
    eval_every: int = 1

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def validate(self) -> None:
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < total_epochs ({self.total_epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        FreezePolicy(self.tuning_mode)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    eval_top1: float
    tunable_params: int
    wall_ms: float


@dataclass
class RunReport:
    rows: list[EpochRow] = field(default_factory=list)
    initial_top1: float | None = None
    mode: str = ""
    tunable_params: int = 0

    @property
    def final_top1(self) -> float:
        evaluated = [r.eval_top1 for r in self.rows if not math.isnan(r.eval_top1)]
        return evaluated[-1] if evaluated else self.initial_top1

    def curve(self) -> list[float]:
        return [r.eval_top1 for r in self.rows]

    def to_csv(self, path, extra: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            write_rows(fh, self.rows, extra)

    @classmethod
    def from_csv(cls, path) -> RunReport:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [EpochRow(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                             float(r["eval_top1"]), int(r["tunable_params"]), float(r["wall_ms"]))
                    for r in reader]
        return cls(rows, tunable_params=rows[0].tunable_params if rows else 0)


def write_rows(fh, rows, extra: dict | None = None) -> None:
    """CSV with the fixed report header, optionally prefixed by constant key columns."""
    extra = extra or {}
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(list(extra) + list(CSV_HEADER))
    for r in rows:
        w.writerow(list(extra.values()) + [r.epoch, repr(r.lr), repr(r.train_loss),
                                           repr(r.eval_top1), r.tunable_params, f"{r.wall_ms:.3f}"])


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) epoch position."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    peak = cfg.effective_lr
    if epoch < cfg.warmup_epochs:
        return peak * epoch / cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float = 0.0) -> None:
    """v <- momentum * v + g;  p <- p - lr * v. Only names in ``params`` move."""
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        p.data -= lr * v


def predict_logits(model: VitModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        out = [model(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
    finally:
        model.train(was)
    return np.concatenate(out)


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: VitModel, data: Dataset) -> float:
    """Top-1 accuracy in eval mode (no dropout, BatchNorm running statistics)."""
    if len(data) == 0:
        raise ValueError("evaluate() on an empty dataset")
    return top1(predict_logits(model, data.images), data.labels)


def frozen_digest(model: VitModel, policy: FreezePolicy | None = None) -> str:
    """sha256 over frozen parameters (backbone names when no policy is given)."""
    h = hashlib.sha256()
    for name, t in model.params.items():
        frozen = not policy.trainable(name) if policy else subset_of(name) == "backbone"
        if frozen:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def prepare(model: VitModel, mode: str, num_classes: int, seed: int,
            adapter: AdapterConfig | None = None, prompt: PromptConfig | None = None) -> VitModel:
    """Attach a fresh head and the mode's extra modules, then apply its freeze policy.

    Head, adapters and prompts draw from separate child streams of ``seed`` so
    the head initialization does not depend on the mode.
    """
    policy = FreezePolicy(mode)
    root = Rng(seed)
    model.reset_head(num_classes, root.spawn(100))
    if mode == "adaptformer":
        model.add_adapters(adapter or AdapterConfig(), root.spawn(101))
    elif mode == "vpt":
        model.add_prompts(prompt or PromptConfig(), root.spawn(102))
    model.apply_policy(policy)
    return model


def train(model: VitModel, train_set: Dataset, eval_set: Dataset | None,
          cfg: TrainConfig) -> tuple[RunReport, VitModel]:
    """Run ``cfg.total_epochs`` epochs under the model's current freeze state.

    Shuffling and dropout derive from ``cfg.seed``. The LR is updated per
    step using fractional epochs; each row logs the LR at the epoch start.
    """
    cfg.validate()
    model.apply_policy(FreezePolicy(cfg.tuning_mode))
    root = Rng(cfg.seed)
    order_rng = root.spawn(1)
    model.dropout_rng = root.spawn(2)
    params = model.trainable_parameters()
    tunable = sum(t.size for t in params.values())
    report = RunReport(mode=cfg.tuning_mode, tunable_params=tunable)
    if eval_set is not None and len(eval_set):
        report.initial_top1 = evaluate(model, eval_set)
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    steps = max(n // bs, 1)
    velocity: dict[str, np.ndarray] = {}
    for epoch in range(cfg.total_epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        model.train()
        losses = []
        for b in range(steps):
            idx = order[b * bs:(b + 1) * bs]
            lr = lr_at(epoch + b / steps, cfg)
            loss = T.cross_entropy(model(train_set.images[idx]), train_set.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(epoch, b, value)
            T.backward(loss)
            sgd_step(params, velocity, lr, cfg.momentum, cfg.weight_decay)
            model.zero_grad()
            losses.append(value)
        model.eval()
        acc = float("nan")
        if eval_set is not None and len(eval_set) and (epoch + 1) % cfg.eval_every == 0:
            acc = evaluate(model, eval_set)
        wall = (time.perf_counter() - t0) * 1e3
        report.rows.append(EpochRow(epoch, lr_at(epoch, cfg), float(np.mean(losses)), acc, tunable, wall))
        log.info("epoch %d lr %.5f loss %.4f top1 %.4f", epoch, report.rows[-1].lr,
                 report.rows[-1].train_loss, acc)
    model.eval()
    return report, model


def config_dict(cfg) -> dict:
    return asdict(cfg)
