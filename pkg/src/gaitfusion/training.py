"""The training loop: PK batches, triplet + softmax losses, SGD."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import checkpoint_save
from .data.dataset import collate, pk_sample
from .data.preprocess import AugmentPolicy
from .losses import softmax_ce, triplet_loss
from .optim import SGD, lr_schedule
from .retrieval import distance_matrix
from .tensor import Tape, backward

LOG_HEADER = ("step", "lr", "triplet_loss", "softmax_loss")


@dataclass
class TrainConfig:
    batch: tuple = (4, 4, 8)  # (q identities, p sequences, k frames)
    base_lr: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    milestones: tuple = ()
    total_steps: int = 100
    triplet_weight: float = 1.0
    softmax_weight: float = 1.0
    margin: float = 0.2
    seed: int = 0
    max_rotation: float = 10.0
    flip_prob: float = 0.0

    def __post_init__(self):
        self.batch = tuple(int(v) for v in self.batch)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if len(self.batch) != 3 or min(self.batch) < 1:
            raise ValueError(f"batch must be three positive ints (q, p, k), got {self.batch}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.total_steps:
            raise ValueError("milestones must lie below total_steps")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    @property
    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.max_rotation, self.flip_prob)


def batch_rank1(embeddings: np.ndarray, labels) -> float:
    """Leave-one-out nearest-neighbour accuracy inside a batch."""
    labels = np.asarray(labels)
    d = distance_matrix(embeddings, embeddings)
    np.fill_diagonal(d, np.inf)
    return float(np.mean(labels[np.argmin(d, axis=1)] == labels))


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)  # dicts: step, lr, triplet_loss, softmax_loss, rank1
    rng: np.random.Generator | None = None

    def losses(self) -> np.ndarray:
        return np.array([[r["triplet_loss"], r["softmax_loss"]] for r in self.log])


def write_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["step"], repr(r["lr"]), repr(r["triplet_loss"]), repr(r["softmax_loss"])])


def train_step(model, dataset, config: TrainConfig, optimizer: SGD, step: int, rng) -> dict:
    q, p, k = config.batch
    lr = lr_schedule(step, config.base_lr, config.milestones)
    items = pk_sample(dataset, q, p, k, rng)
    frames, labels = collate(dataset, items, config.augment_policy, rng, model.config.modalities)
    model.train()
    model.zero_grad()
    with Tape() as tape:
        emb, logits = model(frames)
        tri = triplet_loss(emb, labels, config.margin)
        ce = softmax_ce(logits, labels)
        loss = tri * config.triplet_weight + ce * config.softmax_weight
    backward(loss, tape)
    tape.clear()
    optimizer.step(lr)
    row = {
        "step": step,
        "lr": lr,
        "triplet_loss": float(tri.item()),
        "softmax_loss": float(ce.item()),
        "rank1": batch_rank1(emb.data, labels),
    }
    if not (math.isfinite(row["triplet_loss"]) and math.isfinite(row["softmax_loss"])):
        raise FloatingPointError(f"non-finite loss at step {step}: {row}")
    return row


def train(model, dataset, config: TrainConfig, out_dir=None, callback=None) -> TrainResult:
    """Run ``config.total_steps`` SGD steps.  With ``out_dir`` the loss log is
    written to ``train_log.csv`` and the final state to ``model.gfck``.

    All randomness (sampling, augmentation) comes from one generator seeded
    with ``config.seed``, so single-threaded runs are reproducible.
    """
    config.validate()
    if dataset.num_classes > model.config.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} identities, model classifies {model.config.num_classes}")
    rng = np.random.default_rng(config.seed)
    optimizer = SGD(model.parameters(), config.momentum, config.weight_decay)
    result = TrainResult(model, [], rng)
    for step in range(config.total_steps):
        row = train_step(model, dataset, config, optimizer, step, rng)
        result.log.append(row)
        if callback is not None:
            callback(row)
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(result.log, out / "train_log.csv")
        checkpoint_save(model, out / "model.gfck", config.total_steps, rng.bit_generator.state)
    return result
