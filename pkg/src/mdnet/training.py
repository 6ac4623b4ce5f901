"""Training loop with deep supervision, early stopping, checkpointing and history files.

Output directory contents (when ``out_dir`` is given):

    history.jsonl   one JSON record per epoch: epoch, train_loss, val_loss,
                    val_dsc (per head), best_epoch. Deterministic for a seed.
    timing.jsonl    one JSON record per epoch with wall-clock seconds. Kept
                    separate so history files of seeded runs compare equal.
    best.ckpt       weights with the lowest validation loss so far
    last.ckpt       weights, Adam state and loop state after the latest epoch
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from mdnet.checkpoint import load_checkpoint, optimizer_state, save_checkpoint
from mdnet.config import ModelConfig, TrainConfig
from mdnet.data import Sample, SampleDataset
from mdnet.errors import TrainingDivergedError
from mdnet.losses import deep_supervision_loss, hard_dice
from mdnet.model import MDNet

log = logging.getLogger(__name__)


class EarlyStopping:
    """Track the best validation loss and signal after ``patience`` epochs without improvement."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record ``val_loss`` for ``epoch``; return True if it is a new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience

    def state(self) -> dict[str, Any]:
        return {"best": self.best, "best_epoch": self.best_epoch, "bad_epochs": self.bad_epochs}

    def load(self, state: dict[str, Any]) -> None:
        self.best = state["best"]
        self.best_epoch = state["best_epoch"]
        self.bad_epochs = state["bad_epochs"]


@dataclass
class TrainResult:
    model: MDNet
    history: list[dict[str, Any]]
    best_epoch: int
    best_val_loss: float
    timings: list[float] = field(default_factory=list)


def _dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


def _batches(n: int, batch_size: int, generator: torch.Generator | None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@torch.no_grad()
def recalibrate_batchnorm(model: torch.nn.Module, images: torch.Tensor, batch_size: int) -> None:
    """Replace batch-norm running statistics by their average over ``images``.

    With few optimizer steps per epoch the exponential running averages trail
    the weights by several steps, and inference-mode outputs can be far from
    what training sees. Re-estimating the statistics for the current weights
    removes that lag. Batches are visited in a fixed order.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    was_training = model.training
    momenta = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over the batches below
    model.train()
    try:
        for idx in _batches(len(images), batch_size, None):
            model(images[idx])
    finally:
        for m, momentum in zip(norms, momenta):
            m.momentum = momentum
        model.train(was_training)


@torch.no_grad()
def evaluate_loss(
    model: MDNet,
    images: torch.Tensor,
    masks: torch.Tensor,
    config: TrainConfig,
) -> tuple[float, list[float]]:
    """Mean deep-supervision loss and mean per-head Dice over a set, in inference mode."""
    was_training = model.training
    model.eval()
    losses, dices = [], [[], [], []]
    for idx in _batches(len(images), config.batch_size, None):
        out = model(images[idx])
        target = masks[idx]
        for i in range(len(idx)):
            pieces = [m[i:i + 1] for m in out]
            losses.append(float(deep_supervision_loss(pieces, target[i:i + 1], config.loss_weights, config.dice_smooth)))
        for head, logits in enumerate(out):
            dices[head].extend(hard_dice(torch.sigmoid(logits), target).tolist())
    model.train(was_training)
    return math.fsum(losses) / len(losses), [math.fsum(d) / len(d) for d in dices]


def _meta(model_config: ModelConfig, train_config: TrainConfig, **extra) -> dict[str, Any]:
    return {
        "preset": model_config.preset,
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        **extra,
    }


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: list[Sample] | SampleDataset,
    val_set: list[Sample] | SampleDataset,
    out_dir: str | Path | None = None,
    resume: bool = False,
    extra_meta: dict[str, Any] | None = None,
) -> TrainResult:
    """Fit MDNet with Adam on the deep-supervision loss.

    Batches are reshuffled every epoch with a generator seeded from
    ``(seed, epoch)``, so the batch order does not depend on whether the run was
    resumed. The returned model carries the best-validation weights.
    """
    dtype = _dtype(train_config.dtype)
    train_ds = train_set if isinstance(train_set, SampleDataset) else SampleDataset(train_set, dtype)
    val_ds = val_set if isinstance(val_set, SampleDataset) else SampleDataset(val_set, dtype)
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be nonempty")
    images, masks = (t.to(dtype) for t in train_ds.tensors())
    val_images, val_masks = (t.to(dtype) for t in val_ds.tensors())

    torch.manual_seed(train_config.seed)
    model = MDNet(model_config).to(dtype)
    if train_config.freeze_encoder:
        model.encoder.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        params, lr=train_config.learning_rate, betas=train_config.betas, eps=train_config.adam_eps
    )
    stopper = EarlyStopping(train_config.patience)
    history: list[dict[str, Any]] = []
    timings: list[float] = []
    best_state = copy.deepcopy(model.state_dict())
    start_epoch = 1
    image_size = int(images.shape[-1])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume:
        if out is None or not (out / "last.ckpt").exists():
            raise FileNotFoundError("--resume needs an output directory containing last.ckpt")
        state, meta = load_checkpoint(out / "last.ckpt")
        model.load_state_dict(state)
        optimizer.load_state_dict(optimizer_state(meta))
        stopper.load(meta["early_stopping"])
        history = meta["history"]
        start_epoch = meta["epoch"] + 1
        best_state, _ = load_checkpoint(out / "best.ckpt")
        log.info("resumed at epoch %d", start_epoch)
        if stopper.should_stop:
            start_epoch = train_config.max_epochs + 1

    for epoch in range(start_epoch, train_config.max_epochs + 1):
        tic = time.perf_counter()
        model.train()
        generator = torch.Generator().manual_seed(train_config.seed * 1_000_003 + epoch)
        batch_losses = []
        for b, idx in enumerate(_batches(len(images), train_config.batch_size, generator)):
            x, y = images[idx], masks[idx]
            if train_config.hflip:
                flip = torch.rand(len(idx), generator=generator) < 0.5
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
                y = torch.where(flip[:, None, None, None], y.flip(-1), y)
            optimizer.zero_grad(set_to_none=True)
            loss = deep_supervision_loss(model(x), y, train_config.loss_weights, train_config.dice_smooth)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item() * len(idx))
        train_loss = math.fsum(batch_losses) / len(images)
        if train_config.recalibrate_bn:
            recalibrate_batchnorm(model, images, train_config.batch_size)
        val_loss, val_dsc = evaluate_loss(model, val_images, val_masks, train_config)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        improved = stopper.update(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_dsc": val_dsc,
            "best_epoch": stopper.best_epoch,
        }
        history.append(record)
        timings.append(time.perf_counter() - tic)
        log.info("epoch %d train %.4f val %.4f dsc %s", epoch, train_loss, val_loss, [round(d, 4) for d in val_dsc])

        if out is not None:
            meta = _meta(model_config, train_config, image_size=image_size, epoch=epoch, **(extra_meta or {}))
            if improved:
                save_checkpoint(model, {**meta, "kind": "best", "val_loss": val_loss}, out / "best.ckpt")
            save_checkpoint(
                model,
                {**meta, "kind": "last", "early_stopping": stopper.state(), "history": history},
                out / "last.ckpt",
                optimizer=optimizer,
            )
            with open(out / "history.jsonl", "a" if epoch > 1 else "w") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with open(out / "timing.jsonl", "a" if epoch > 1 else "w") as fh:
                fh.write(json.dumps({"epoch": epoch, "seconds": timings[-1]}) + "\n")
        if stopper.should_stop:
            log.info("early stopping after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    model.load_state_dict(best_state)
    return TrainResult(model, history, stopper.best_epoch, stopper.best, timings)


def load_model(path: str | Path) -> tuple[MDNet, dict[str, Any]]:
    """Rebuild an MDNet from a checkpoint written by :func:`train`."""
    state, meta = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    model = MDNet(config)
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype if dtype.is_floating_point else torch.float32)
    model.load_state_dict(state)
    model.eval()
    return model, meta
