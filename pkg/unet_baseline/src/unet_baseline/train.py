"""Full-batch quasi-Newton training with best-validation checkpointing.

The optimizer is L-BFGS with a strong-Wolfe line search; every iteration
runs the whole training batch (the objective averages over all training
images and pixels). Validation images are scored each iteration but never
contribute gradients. The checkpoint that minimizes validation loss wins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .bundles import Subject, write_mask_bundle
from .losses import cross_entropy, dice_per_class
from .model import UNet, forward_probabilities, predict_mask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    train_size: int = 41
    val_size: int = 10
    iterations: int = 400
    seed: int = 0
    base_channels: int = 16
    depth: int = 3
    history_size: int = 10
    deterministic: bool = True
    checkpoint_best: bool = True  # False keeps the final iterate instead

    def __post_init__(self):
        if self.train_size < 1 or self.val_size < 1:
            raise ValueError("both splits need at least one subject")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def split_pool(pool: list[Subject], config: TrainConfig):
    """Disjoint train/validation split; sizes must sum to the pool size."""
    if config.train_size + config.val_size != len(pool):
        raise ValueError(
            f"split {config.train_size}+{config.val_size} != pool size {len(pool)}"
        )
    order = np.random.default_rng(config.seed).permutation(len(pool))
    train = [pool[k] for k in order[: config.train_size]]
    val = [pool[k] for k in order[config.train_size:]]
    return train, val


def _batch(subjects: list[Subject]):
    x = torch.from_numpy(np.stack([s.channels for s in subjects]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.mask for s in subjects]).astype(np.int64))
    return x, y


def _metrics(model: UNet, x: torch.Tensor, y: torch.Tensor):
    """Loss via the probability-map definition plus per-class Dice."""
    model.eval()
    with torch.no_grad():
        probs = model(x)
    probs_np = probs.permute(0, 2, 3, 1).numpy().astype(np.float64)
    y_np = y.numpy()
    losses = [cross_entropy(probs_np[k], y_np[k]) for k in range(len(y_np))]
    agg = {0: [], 1: [], 2: []}
    for k in range(len(y_np)):
        d = dice_per_class(predict_mask(probs_np[k]), y_np[k])
        for cls in agg:
            agg[cls].append(d[cls])
    return float(np.mean(losses)), {cls: float(np.mean(v)) for cls, v in agg.items()}


def train(pool: list[Subject], config: TrainConfig):
    """Returns (checkpoint dict, history list). The checkpoint holds the
    weights with the lowest validation loss seen during training."""
    for s in pool:
        if s.mask is None:
            raise ValueError(f"subject {s.id} has no mask")
        if not s.normalized:
            logger.warning("subject %s is not normalized; expected preprocessed bundles", s.id)
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    model = UNet(base_channels=config.base_channels, depth=config.depth)
    train_subjects, val_subjects = split_pool(pool, config)
    xt, yt = _batch(train_subjects)
    xv, yv = _batch(val_subjects)

    optimizer = torch.optim.LBFGS(
        model.parameters(),
        max_iter=1,
        max_eval=25,
        history_size=config.history_size,
        line_search_fn="strong_wolfe",
        tolerance_grad=0.0,
        tolerance_change=0.0,
    )

    def closure():
        optimizer.zero_grad()
        model.train()
        loss = F.cross_entropy(model.logits(xt), yt)
        loss.backward()
        return loss

    history = []
    train_loss, train_dice = _metrics(model, xt, yt)
    val_loss, val_dice = _metrics(model, xv, yv)
    history.append({
        "iteration": 0, "train_loss": train_loss, "val_loss": val_loss,
        "train_dice": train_dice, "val_dice": val_dice,
    })
    best_val = val_loss
    best_iteration = 0
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    for it in range(1, config.iterations + 1):
        optimizer.step(closure)
        train_loss, train_dice = _metrics(model, xt, yt)
        val_loss, val_dice = _metrics(model, xv, yv)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            logger.warning("training diverged at iteration %d; keeping last good checkpoint", it)
            break
        history.append({
            "iteration": it, "train_loss": train_loss, "val_loss": val_loss,
            "train_dice": train_dice, "val_dice": val_dice,
        })
        if config.checkpoint_best:
            if val_loss < best_val:
                best_val = val_loss
                best_iteration = it
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:  # keep the newest finite iterate
            best_val = val_loss
            best_iteration = it
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    checkpoint = {
        "architecture": model.architecture,
        "architecture_hash": model.architecture_hash,
        "state_dict": best_state,
        "history": history,
        "best_iteration": best_iteration,
        "best_val_loss": best_val,
        "train_ids": [s.id for s in train_subjects],
        "val_ids": [s.id for s in val_subjects],
        "config": {
            "train_size": config.train_size, "val_size": config.val_size,
            "iterations": config.iterations, "seed": config.seed,
            "base_channels": config.base_channels, "depth": config.depth,
            "history_size": config.history_size,
        },
    }
    return checkpoint, history


def save_checkpoint(checkpoint: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)


def load_checkpoint(path) -> tuple[UNet, dict]:
    """Rebuild the model; refuses a checkpoint whose architecture hash does
    not match the reconstructed topology."""
    checkpoint = torch.load(Path(path), map_location="cpu", weights_only=False)
    arch = checkpoint["architecture"]
    model = UNet(base_channels=arch["base_channels"], depth=arch["depth"])
    if model.architecture_hash != checkpoint["architecture_hash"]:
        raise ValueError("architecture hash mismatch: wrong or corrupted checkpoint")
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model, checkpoint


def export_masks(model: UNet, subjects: list[Subject], out_dir, keep_going: bool = False) -> list[str]:
    """Predict and write one mask-only bundle per subject; returns the ids
    that failed (empty unless keep_going swallowed errors)."""
    out = Path(out_dir)
    failed = []
    for s in subjects:
        try:
            probs = forward_probabilities(model, s.channels)
            write_mask_bundle(s.id, predict_mask(probs), out / s.id)
        except Exception as exc:  # noqa: BLE001 - per-subject isolation
            if not keep_going:
                raise
            logger.error("export failed for %s: %s", s.id, exc)
            failed.append(s.id)
    return failed
