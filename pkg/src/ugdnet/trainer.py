"""SGD training loop with polynomial learning-rate decay and checkpointing."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import save_checkpoint
from .core import backward
from .data import Sample, shuffled
from .errors import ConfigurationError, NonFiniteError, TrainingAborted
from .losses import LossWeights, total_loss
from .metrics import dsc
from .network import UGDNet, mask_from_probs

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "total", "l_ds", "l_seg", "dice", "bdou_final", "val_dsc")


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "poly"
    lr_power: float = 0.9
    seed: int = 0
    checkpoint_every: int = 1
    dtype: str = "float32"
    grad_clip: float = 0.0  # global L2 norm cap; 0 disables

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("epochs, batch_size and checkpoint_every must be positive")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigurationError("base_lr, momentum, weight_decay and grad_clip must be nonnegative")
        if self.lr_schedule not in ("poly", "linear"):
            raise ConfigurationError(f"lr_schedule must be 'poly' or 'linear', got {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step: int = 0
    buffers: dict[str, Tensor] = field(default_factory=dict)


def lr_schedule(step: int, total_steps: int, base_lr: float = 1e-3, power: float = 0.9,
                kind: str = "poly") -> float:
    """base_lr * (1 - step/total)^power (power 1 for ``kind="linear"``); 0 at the end."""
    if total_steps <= 0:
        return 0.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = 1.0 - step / total_steps
    return base_lr * frac ** (1.0 if kind == "linear" else power)


@torch.no_grad()
def sgd_step(params: dict[str, nn.Parameter], state: OptimizerState, lr: float) -> None:
    """v <- momentum * v + (g + wd * theta);  theta <- theta - lr * v."""
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if not torch.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient in {name} at step {state.step}", state.step, name)
        d = g + state.weight_decay * p if state.weight_decay else g.clone()
        buf = state.buffers.get(name)
        if buf is None:
            buf = torch.zeros_like(p)
            state.buffers[name] = buf
        buf.mul_(state.momentum).add_(d)
        p.sub_(lr * buf)
    state.step += 1


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded per-epoch order; the final short batch is dropped (kept if it is the only one)."""
    order = shuffled(range(n), seed * 100003 + epoch)
    full = [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]
    return full or [order]


def to_tensors(samples: Sequence[Sample], dtype: torch.dtype) -> tuple[Tensor, Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None]).to(dtype)
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float64)).to(dtype)
    return x, y


@torch.no_grad()
def predict_masks(model: UGDNet, samples: Sequence[Sample], batch_size: int = 16) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for i in range(0, len(samples), batch_size):
            x, _ = to_tensors(samples[i:i + batch_size], dtype)
            out.extend(m.numpy().astype(np.uint8) for m in mask_from_probs(model(x).fused))
    finally:
        model.train(was_training)
    return out


def mean_dsc(model: UGDNet, samples: Sequence[Sample]) -> float:
    preds = predict_masks(model, samples)
    return float(np.mean([dsc(p, s.mask) for p, s in zip(preds, samples)]))


@dataclass
class TrainResult:
    best_val_dsc: float
    best_epoch: int
    steps: int
    history: list[dict]
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def train(
    cfg: TrainConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    model: UGDNet,
    out_dir=None,
    weights: LossWeights | None = None,
    config_echo: Optional[dict] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train ``model`` in place.

    Every step appends a row to ``out_dir/train_log.csv``; the row that
    closes an epoch also carries the validation DSC of the fused output.
    ``best.ckpt`` tracks the best validation DSC (training DSC when there
    is no validation set) and ``last.ckpt`` is refreshed every
    ``checkpoint_every`` epochs.  A non-finite loss raises
    :class:`TrainingAborted` without touching the saved checkpoints.
    """
    cfg.validate()
    if not train_samples:
        raise ConfigurationError("no training samples")
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    model.to(dtype)
    model.train()
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    state = OptimizerState(cfg.base_lr, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = len(batches(len(train_samples), cfg.batch_size, cfg.seed, 0))
    total_steps = steps_per_epoch * cfg.epochs
    # the last step uses lr = 0 so the schedule really ends at zero
    denom = max(total_steps - 1, 1)
    use_bds = model.cfg.use_bds_loss
    echo = config_echo or {}

    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()

    x_all, y_all = to_tensors(train_samples, dtype)
    best, best_epoch, history = -1.0, -1, []
    best_path = out / "best.ckpt" if out else None
    last_path = out / "last.ckpt" if out else None
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            for bi, idx in enumerate(batches(len(train_samples), cfg.batch_size, cfg.seed, epoch)):
                step = state.step
                lr = lr_schedule(min(step, denom), denom, cfg.base_lr, cfg.lr_power, cfg.lr_schedule)
                x, y = x_all[idx], y_all[idx]
                model.zero_grad(set_to_none=True)
                try:
                    out_net = model(x)
                except NonFiniteError as e:
                    raise TrainingAborted(f"non-finite activations at step {step}: {e}", step) from e
                losses = total_loss(out_net, y, weights, use_bds)
                if not math.isfinite(float(losses.total.detach())):
                    raise TrainingAborted(f"non-finite loss at step {step}", step)
                backward(losses.total)
                if cfg.grad_clip:
                    # non-finite norms fall through to sgd_step, which aborts
                    nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
                sgd_step(params, state, lr)
                row = {"step": step, "epoch": epoch, "lr": lr, **losses.row(), "val_dsc": ""}
                if bi == steps_per_epoch - 1:
                    val = mean_dsc(model, val_samples) if val_samples else mean_dsc(model, train_samples)
                    row["val_dsc"] = val
                    if val > best:
                        best, best_epoch = val, epoch
                        if best_path:
                            save_checkpoint(best_path, model, echo, {"epoch": epoch, "val_dsc": val, "step": step})
                    if last_path and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1):
                        save_checkpoint(last_path, model, echo, {"epoch": epoch, "val_dsc": val, "step": step})
                    log.info("epoch %d step %d lr %.2e loss %.4f val_dsc %.2f (%.0fs)",
                             epoch, step, lr, float(losses.total.detach()), val, time.time() - t0)
                    if on_epoch:
                        on_epoch(epoch, val)
                history.append(row)
                if writer:
                    writer.writerow(row)
    finally:
        if fh:
            fh.close()
    return TrainResult(best, best_epoch, state.step, history, best_path, last_path)
