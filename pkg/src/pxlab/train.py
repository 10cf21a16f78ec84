"""Masked SGD training and evaluation for pruned subnetworks.

Gradient updates are gated by the mask, so masked parameters stay exactly
zero throughout training; their weight-decay term is automatically zero
because the parameter itself is. Shuffling comes from a seeded stream, so
identical (config, mask, dataset, seed) reproduce the history bitwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .model import Network
from .tensor import Rng


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 64
    # (epoch, factor): multiply the learning rate by factor at that epoch
    lr_drops: list[tuple[int, float]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        epochs = [e for e, _ in self.lr_drops]
        if any(f <= 0 for _, f in self.lr_drops):
            raise ValueError("lr drop factors must be > 0")
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ValueError("lr drop epochs must be strictly increasing")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy with log-sum-exp stabilization.

    Returns (loss, gradient w.r.t. logits = (softmax - onehot) / batch).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")
    shift = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    loss = float(np.mean(lse - shift[np.arange(n), labels]))
    soft = np.exp(shift)
    soft /= soft.sum(axis=1, keepdims=True)
    soft[np.arange(n), labels] -= 1.0
    return loss, soft / n


def sgd_step(net: Network, grads: np.ndarray, cfg: TrainConfig,
             velocity: np.ndarray, lr: float | None = None) -> np.ndarray:
    """One momentum-SGD step, applied only at unmasked positions.

    v <- mu v + g + lambda theta; theta <- theta - lr v. Velocity and
    parameters are updated in place; masked positions stay exactly 0.
    """
    alpha = cfg.lr if lr is None else lr
    velocity *= cfg.momentum
    velocity += grads + cfg.weight_decay * net.params
    velocity *= net.mask
    net.params -= alpha * velocity
    return net.params


def train(net: Network, mask: np.ndarray | None, dataset, cfg: TrainConfig) -> list[dict]:
    """Train in place; returns per-epoch history rows.

    History rows carry (epoch, split, loss, accuracy) with loss the running
    mean of batch losses and accuracy measured on the train split after the
    epoch. Aborts with the epoch index if the loss goes non-finite.
    """
    if mask is not None:
        net = net.with_mask(mask)
    net.params *= net.mask
    rng = Rng(cfg.seed)
    velocity = np.zeros(net.m)
    n = dataset.X.shape[0]
    lr = cfg.lr
    drops = dict(cfg.lr_drops)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        if epoch in drops:
            lr *= drops[epoch]
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, _, tape = autodiff.forward(net, dataset.X[idx])
            loss, g_logits = cross_entropy(out, dataset.Y[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = autodiff.backward(tape, g_logits)
            sgd_step(net, grads, cfg, velocity, lr)
            losses.append(loss)
        history.append({
            "epoch": epoch,
            "split": "train",
            "loss": float(np.mean(losses)),
            "accuracy": evaluate(net, None, dataset),
        })
    return history


def evaluate(net: Network, mask: np.ndarray | None, dataset) -> float:
    """Argmax accuracy in [0, 1]; prediction ties go to the lowest class."""
    if mask is not None:
        net = net.with_mask(mask)
    correct = 0
    n = dataset.X.shape[0]
    for start in range(0, n, 512):
        out, _, _ = autodiff.forward(net, dataset.X[start:start + 512], tape=False)
        correct += int(np.sum(np.argmax(out, axis=1) == dataset.Y[start:start + 512]))
    return correct / n


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for row in history:
            writer.writerow([row["epoch"], row["split"],
                             f"{row['loss']:.10f}", f"{row['accuracy']:.6f}"])
