"""Training loop, evaluation and single-pair inference."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .data import Dataset, read_rgb, write_mask
from .errors import ContractError, ShapeError
from .losses import METRIC_NAMES, ConfusionCounts, metrics, total_loss
from .model import ChangeNet, build_model
from .optim import AdamW

log = logging.getLogger(__name__)

CSV_FIELDS = ("epoch", "loss", *METRIC_NAMES)


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    eval_batch_size: int = 16
    memory_budget: float | None = None  # bytes; reject configs whose forward would exceed it
    target_f1: float | None = None  # stop after the first epoch whose validation F1 reaches this


@dataclass
class TrainResult:
    model: ChangeNet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_f1: float = -1.0
    seconds: float = 0.0
    skipped_steps: int = 0


def batches(n: int, size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def predict(model: ChangeNet, pre: np.ndarray, post: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax change maps ``[N,H,W]`` (uint8) in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for idx in batches(len(pre), batch_size):
            logits = model(pre[idx], post[idx]).data
            out.append((logits[:, 1] > logits[:, 0]).astype(np.uint8))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, *pre.shape[2:]), dtype=np.uint8)


def evaluate(model: ChangeNet, ds: Dataset, batch_size: int = 16) -> dict[str, float]:
    pred = predict(model, ds.pre, ds.post, batch_size)
    return metrics(ConfusionCounts.from_masks(pred, ds.mask))


def train(config: ModelConfig, train_ds: Dataset, val_ds: Dataset | None = None,
          settings: TrainSettings | None = None, out_dir: str | Path | None = None,
          restore_best: bool = True) -> TrainResult:
    """Seeded mini-batch AdamW on cross-entropy + Lovasz loss.

    Each epoch is evaluated on ``val_ds`` (or the training set if none is
    given); metrics go to ``out_dir/metrics.csv`` and the best-F1 weights to
    ``out_dir/best.ckpt``. The learning rate is constant.
    """
    settings = settings or TrainSettings()
    if len(train_ds) == 0:
        raise ContractError("training set is empty")
    if settings.memory_budget is not None:
        from .profiler import check_memory_budget

        check_memory_budget(config, (settings.batch_size, 3, *train_ds.pre.shape[2:]), settings.memory_budget)
    val_ds = val_ds if val_ds is not None and len(val_ds) else train_ds
    model = build_model(config)
    opt = AdamW(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    out_dir = Path(out_dir) if out_dir is not None else None
    csv_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(CSV_FIELDS)
    result = TrainResult(model)
    best_state = None
    start = time.perf_counter()
    log.info("training %d params for %d epochs (lr %g, wd %g, batch %d, constant LR)",
             model.num_parameters(), settings.epochs, settings.lr, settings.weight_decay, settings.batch_size)
    try:
        for epoch in range(1, settings.epochs + 1):
            model.train()
            rng = np.random.default_rng([settings.seed, epoch])
            losses = []
            for idx in batches(len(train_ds), settings.batch_size, rng):
                logits = model(train_ds.pre[idx], train_ds.post[idx])
                loss = total_loss(logits, train_ds.mask[idx])
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                losses.append(float(loss.data))
            scores = evaluate(model, val_ds, settings.eval_batch_size)
            row = {"epoch": epoch, "loss": float(np.mean(losses)), **scores}
            result.history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"]] + [f"{row[k]:.6f}" for k in CSV_FIELDS[1:]])
                csv_fh.flush()
            log.info("epoch %d loss %.4f F1 %.4f IoU %.4f", epoch, row["loss"], row["F1"], row["IoU"])
            if scores["F1"] > result.best_f1:
                result.best_f1, result.best_epoch = scores["F1"], epoch
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", model, config,
                                    {"epoch": epoch, "F1": f"{scores['F1']:.6f}"})
            if settings.target_f1 is not None and scores["F1"] >= settings.target_f1:
                log.info("validation F1 reached %.4f, stopping", settings.target_f1)
                break
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if restore_best and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.seconds = time.perf_counter() - start
    result.skipped_steps = opt.skipped_steps
    return result


def infer(ckpt: str | Path, pre_png: str | Path, post_png: str | Path, out_png: str | Path,
          logits_out: str | Path | None = None) -> np.ndarray:
    """Write the argmax change map of one pair as a 0/255 PNG; returns the map."""
    model, _, _ = load_checkpoint(ckpt)
    pre, post = read_rgb(pre_png), read_rgb(post_png)
    if pre.shape != post.shape:
        raise ShapeError(f"pre {pre.shape[1:]} and post {post.shape[1:]} images differ in size")
    with T.no_grad():
        logits = model(pre[None], post[None]).data[0]
    change = (logits[1] > logits[0]).astype(np.uint8)
    write_mask(out_png, change)
    if logits_out is not None:
        np.save(logits_out, logits)
    return change
