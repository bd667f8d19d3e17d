"""Dice-loss training over fold splits, with run-directory artifacts."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .config import TrainConfig, save_config
from .data import DatasetPool, FoldAssignment, PreprocessedSample, load_sample
from .metrics import METRIC_NAMES, MetricRow, image_metrics, mean_row
from .model import NullBUS, build_model, save_checkpoint
from .prompts import PromptPair

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def soft_dice_loss(probs: torch.Tensor, mask: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """``1 - (2<p, y> + eps) / (|p|_1 + |y|_1 + eps)`` per sample, averaged over the batch.

    Inputs are (B, ...), the first axis always being the batch; a 1-d vector is
    one sample. Probabilities are non-negative so the L1 norms are plain sums.
    """
    if probs.shape != mask.shape:
        raise ValueError(f"prediction {tuple(probs.shape)} and mask {tuple(mask.shape)} differ in shape")
    if probs.dim() <= 1:
        probs, mask = probs[None], mask[None]
    p = probs.reshape(probs.shape[0], -1)
    y = mask.reshape(mask.shape[0], -1).to(p)
    inter = (p * y).sum(dim=1)
    denom = p.sum(dim=1) + y.sum(dim=1)
    return (1.0 - (2.0 * inter + epsilon) / (denom + epsilon)).mean()


def dice_loss(logits: torch.Tensor, mask: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    return soft_dice_loss(torch.sigmoid(logits), mask, epsilon)


def collate(samples: Sequence[PreprocessedSample]) -> tuple[torch.Tensor, torch.Tensor, list[PromptPair]]:
    images = torch.stack([s.image for s in samples])[:, None]
    masks = torch.stack([s.mask for s in samples])[:, None]
    return images, masks, [s.prompts for s in samples]


class Trainer:
    """Owns the optimizer and the RNG that drives shuffling and prompt dropout."""

    def __init__(self, model: NullBUS, learning_rate: float = 1e-3, epsilon: float = 1e-6, seed: int = 0):
        self.model = model
        self.epsilon = epsilon
        self.generator = torch.Generator().manual_seed(seed)
        self.optimizer = torch.optim.Adam(list(model.trainable_parameters()), lr=learning_rate)
        self.steps = 0

    def step(self, samples: Sequence[PreprocessedSample]) -> float:
        self.model.train()
        images, masks, prompts = collate(samples)
        dtype = next(self.model.parameters()).dtype
        logits = self.model(images.to(dtype), prompts, mode="train", generator=self.generator)
        loss = dice_loss(logits, masks.to(dtype), self.epsilon)
        if not torch.isfinite(loss):
            ids = [s.id for s in samples]
            raise TrainingError(f"non-finite loss {loss.item()} at step {self.steps} on samples {ids}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.steps += 1
        return float(loss.item())

    def epoch_batches(self, samples: Sequence[PreprocessedSample], batch_size: int) -> list[list[PreprocessedSample]]:
        order = torch.randperm(len(samples), generator=self.generator).tolist()
        return [[samples[i] for i in order[j:j + batch_size]] for j in range(0, len(order), batch_size)]


@torch.no_grad()
def predict(model: NullBUS, samples: Sequence[PreprocessedSample], batch_size: int = 8) -> list[torch.Tensor]:
    """Eval-mode probabilities, one (H, W) map per sample."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for j in range(0, len(samples), batch_size):
        images, _, prompts = collate(samples[j:j + batch_size])
        probs = torch.sigmoid(model(images.to(dtype), prompts, mode="eval"))
        out.extend(p[0] for p in probs)
    return out


def evaluate(model: NullBUS, samples: Sequence[PreprocessedSample], threshold: float = 0.5,
             batch_size: int = 8) -> list[MetricRow]:
    probs = predict(model, samples, batch_size)
    return [image_metrics(p, s.mask, threshold) for p, s in zip(probs, samples)]


@dataclass
class RunRecord:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_dice: float = -math.inf
    checkpoint: Path | None = None
    run_dir: Path | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    model: NullBUS | None = None


HISTORY_COLUMNS = ("epoch", "loss", *METRIC_NAMES)


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"], *(repr(float(row[k])) for k in HISTORY_COLUMNS[1:])])


def load_samples(pool: DatasetPool, ids: Sequence[str], size: int) -> list[PreprocessedSample]:
    records = pool.by_id()
    missing = [i for i in ids if i not in records]
    if missing:
        raise TrainingError(f"fold map names ids absent from the pool: {missing[:5]}")
    return [load_sample(records[i], size) for i in ids]


def fit(config: TrainConfig, pool: DatasetPool, folds: FoldAssignment, run_dir: str | Path | None = None,
        cache: dict[str, PreprocessedSample] | None = None) -> RunRecord:
    """Train on every fold except ``config.fold_index`` and validate on it after each epoch.

    The checkpoint with the best validation Dice is kept as ``best.ckpt``.
    ``cache`` (id -> preprocessed sample) lets several runs share decoded images.
    """
    train_ids, val_ids = folds.split(config.fold_index)
    if not train_ids or not val_ids:
        raise TrainingError(f"fold {config.fold_index}: empty split (train={len(train_ids)}, val={len(val_ids)})")
    leaked = set(train_ids) & set(val_ids)
    if leaked:
        raise TrainingError(f"ids in both splits: {sorted(leaked)[:5]}")

    size = config.model.image_size
    cache = {} if cache is None else cache
    need = [i for i in train_ids + val_ids if i not in cache]
    for s in load_samples(pool, need, size):
        cache[s.id] = s
    train = [cache[i] for i in train_ids]
    val = [cache[i] for i in val_ids]

    model = build_model(config.model, seed=config.seed)
    trainer = Trainer(model, config.learning_rate, config.epsilon, seed=config.seed)
    record = RunRecord(config=config.to_dict(), seed=config.seed, train_ids=train_ids, val_ids=val_ids, model=model)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        record.run_dir = run_dir
        save_config(config, run_dir / "config.snapshot")
        folds.save(run_dir / "folds.map")

    best_state = None
    t0 = time.time()
    for epoch in range(config.epochs):
        losses = []
        for batch in trainer.epoch_batches(train, config.batch_size):
            losses.append(trainer.step(batch))
            if config.max_steps is not None and trainer.steps >= config.max_steps:
                break
        rows = evaluate(model, val, config.threshold, config.batch_size)
        summary = mean_row(rows)
        entry = {"epoch": epoch, "loss": sum(losses) / len(losses), **dict(zip(METRIC_NAMES, summary.as_tuple()))}
        record.history.append(entry)
        logger.info("epoch %d loss %.4f val Dice %.4f IoU %.4f (%.1fs)", epoch, entry["loss"], summary.Dice,
                    summary.IoU, time.time() - t0)
        if summary.Dice > record.best_dice:
            record.best_dice = summary.Dice
            record.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if run_dir is not None:
                record.checkpoint = save_checkpoint(model, run_dir / "best.ckpt", epoch=epoch,
                                                    fold_index=config.fold_index, val_dice=summary.Dice)
        if run_dir is not None:
            _write_history(run_dir / "history.rows", record.history)
        if config.max_steps is not None and trainer.steps >= config.max_steps:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return record
