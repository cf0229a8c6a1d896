"""Mini-batch training loop with per-epoch train/validation metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .metrics import MetricAccumulator
from .model import ModelConfig, Params, forward, init_params, loss_grads_probs
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

METRIC_KEYS = ("dice", "jaccard", "iou", "binary_accuracy", "dice_hard", "loss")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dice_smooth: float = 1.0
    seed: int = 0
    validation_fraction: float = 0.2
    threshold: float = 0.5
    # stop once an epoch's hard train Dice reaches this value
    stop_dice: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    train_indices: list[int] = field(default_factory=list)
    validation_indices: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path) -> None:
        cols = ["epoch"] + [f"train_{k}" for k in METRIC_KEYS] + [f"val_{k}" for k in METRIC_KEYS]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for e in self.epochs:
                val = e.get("validation") or {}
                writer.writerow(
                    [e["epoch"]]
                    + [e["train"][k] for k in METRIC_KEYS]
                    + [val.get(k, "") for k in METRIC_KEYS]
                )


def split_indices(n: int, validation_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(math.floor(n * validation_fraction + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def evaluate(params: Params, cfg: ModelConfig, x, y, eps: float = 1.0, batch_size: int = 8,
             threshold: float = 0.5) -> dict[str, float]:
    acc = MetricAccumulator(eps, threshold)
    for start in range(0, len(x), batch_size):
        probs = forward(params, cfg, x[start : start + batch_size])
        acc.update(probs, y[start : start + batch_size])
    return acc.result()


def train(
    x: np.ndarray,
    y: np.ndarray,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: Params | None = None,
    grad_hook: Callable[[Params, int], Params] | None = None,
    step_hook: Callable[[Params, int], Params] | None = None,
) -> tuple[Params, TrainReport]:
    """Fit the model with Adam on Dice loss.

    ``x`` is (N, H, W, C) and ``y`` (N, H, W, 1) in {0, 1}. ``grad_hook`` may
    edit gradients before each update and ``step_hook`` may edit parameters
    after it; both receive the 1-based optimizer step.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty training set")
    if y.shape[:3] != x.shape[:3]:
        raise ValueError(f"chip/label shape mismatch: {x.shape} vs {y.shape}")
    model_cfg.check_input(x.shape)
    y = y.reshape(*x.shape[:3], 1)
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    dtype = params["head.w"].dtype
    x = x.astype(dtype, copy=False)
    y = y.astype(dtype, copy=False)

    tr_idx, val_idx = split_indices(len(x), train_cfg.validation_fraction, train_cfg.seed)
    report = TrainReport(train_indices=tr_idx.tolist(), validation_indices=val_idx.tolist())
    rng = np.random.default_rng(train_cfg.seed + 1)
    state = AdamState()
    step = 0
    eps = train_cfg.dice_smooth
    for epoch in range(1, train_cfg.epochs + 1):
        acc = MetricAccumulator(eps, train_cfg.threshold)
        order = rng.permutation(tr_idx)
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            xb, yb = x[idx], y[idx]
            step += 1
            _, grads, probs = loss_grads_probs(params, model_cfg, xb, yb, eps)
            acc.update(probs, yb)
            if grad_hook is not None:
                grads = grad_hook(grads, step)
            params, state = adam_step(
                params, grads, state, step, train_cfg.learning_rate,
                train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_epsilon,
            )
            if step_hook is not None:
                params = step_hook(params, step)
        entry = {"epoch": epoch, "step": step, "train": acc.result(), "validation": None}
        if len(val_idx):
            entry["validation"] = evaluate(
                params, model_cfg, x[val_idx], y[val_idx], eps, train_cfg.batch_size, train_cfg.threshold
            )
        report.epochs.append(entry)
        log.info(
            "epoch %d: loss %.4f dice %.4f%s", epoch, entry["train"]["loss"], entry["train"]["dice"],
            f" val_dice {entry['validation']['dice']:.4f}" if entry["validation"] else "",
        )
        if train_cfg.stop_dice is not None and entry["train"]["dice_hard"] >= train_cfg.stop_dice:
            break
    return params, report
