"""Training loop for FLODCAST models."""

from __future__ import annotations

import logging
import re
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import InputWindow, NormalizationParams, stack_frame
from .errors import InvalidArgumentError
from .losses import LossWeights, loss_terms
from .model import FlodCast, PredictionBlock, make_checkpoint

log = logging.getLogger(__name__)

CHECKPOINT_PATTERN = re.compile(r"epoch_(\d{4})\.ckpt$")


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    batch_size: int = 12
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dataset_root: str | None = None
    checkpoint_dir: str | None = None
    log_every: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # optional extras, all off by default
    weight_decay: float = 0.0
    grad_clip: float | None = None
    cosine_schedule: bool = False
    per_sample_threshold: bool = False

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise InvalidArgumentError("epochs and batch_size must be positive, learning_rate >= 0")

    def to_dict(self, paths: bool = True) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if not paths:
            del d["dataset_root"], d["checkpoint_dir"]
        return d


def make_training_pairs(sequence, T: int, K: int, norm: NormalizationParams) -> list[tuple[InputWindow, PredictionBlock]]:
    """Stride-1 windows: inputs ``t-T+1..t``, targets ``t+1..t+K``."""
    frames = [stack_frame(f, d, norm) for f, d in sequence]
    pairs = []
    for t in range(T - 1, len(frames) - K):
        target = np.stack(frames[t + 1:t + 1 + K])
        pairs.append((InputWindow(np.stack(frames[t - T + 1:t + 1]), t=t),
                      PredictionBlock(target[..., :2], target[..., 2:])))
    return pairs


class WindowDataset:
    """All training windows of a set of sequences, stored once per frame."""

    def __init__(self, sequences, T: int, K: int, norm: NormalizationParams):
        self.T, self.K = T, K
        self.frames = [np.stack([stack_frame(f, d, norm) for f, d in seq]) for seq in sequences if len(seq)]
        shapes = {fr.shape[1:3] for fr in self.frames}
        if len(shapes) > 1:
            raise InvalidArgumentError(f"sequences disagree on resolution: {sorted(shapes)}")
        self.index = [(s, t) for s, fr in enumerate(self.frames) for t in range(T - 1, len(fr) - K)]

    def __len__(self):
        return len(self.index)

    @property
    def resolution(self) -> tuple[int, int] | None:
        return tuple(self.frames[0].shape[1:3]) if self.frames else None

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xs, ys = [], []
        for i in idx:
            s, t = self.index[i]
            fr = self.frames[s]
            xs.append(fr[t - self.T + 1:t + 1])
            ys.append(fr[t + 1:t + 1 + self.K])
        x, y = np.stack(xs), np.stack(ys)
        return x, y[..., :2], y[..., 2:]


def effective_weights(variant: str, w: LossWeights) -> LossWeights:
    if variant == "no_flow":
        return replace(w, alpha=0.0)
    if variant == "no_depth":
        return replace(w, beta=0.0)
    return w


def make_optimizer(model: FlodCast, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
                            eps=cfg.eps, weight_decay=cfg.weight_decay)


def _lr_at(cfg: TrainConfig, epoch: int, step: int, steps_per_epoch: int) -> float:
    if not cfg.cosine_schedule:
        return cfg.learning_rate
    progress = (epoch * steps_per_epoch + step) / max(cfg.epochs * steps_per_epoch, 1)
    return 0.5 * cfg.learning_rate * (1 + np.cos(np.pi * progress))


def train_step(model, optimizer, batch, weights: LossWeights, per_sample: bool = False, grad_clip=None):
    x, yf, yd = (torch.from_numpy(a) for a in batch)
    pred = model(x)
    total, lf, ld = loss_terms(pred, (yf, yd), weights, per_sample)
    optimizer.zero_grad()
    total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return tuple(float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for v in (total, lf, ld))


def latest_checkpoint(directory) -> Path | None:
    if directory is None or not Path(directory).is_dir():
        return None
    found = sorted(p for p in Path(directory).iterdir() if CHECKPOINT_PATTERN.search(p.name))
    return found[-1] if found else None


@dataclass
class TrainResult:
    epoch_losses: list[float]
    checkpoints: list[Path]
    start_epoch: int = 0


def train(model: FlodCast, dataset: WindowDataset, cfg: TrainConfig, norm: NormalizationParams,
          resume: bool = False, log_path=None, max_steps_per_epoch: int | None = None) -> TrainResult:
    """Optimize ``model`` in place; writes ``epoch_NNNN.ckpt`` after every epoch when a checkpoint_dir is set."""
    if len(dataset) == 0:
        raise InvalidArgumentError("training dataset has no windows (sequences shorter than T+K?)")
    if dataset.resolution != model.config.input_resolution:
        raise InvalidArgumentError(f"dataset resolution {dataset.resolution} != model {model.config.input_resolution}")
    if (dataset.T, dataset.K) != (model.T, model.K):
        raise InvalidArgumentError("dataset windows do not match the model's T and K")
    weights = effective_weights(model.config.variant, cfg.loss_weights)
    optimizer = make_optimizer(model, cfg)
    start = 0
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if resume and (last := latest_checkpoint(ckpt_dir)) is not None:
        ckpt = load_checkpoint(last, kind="flodcast")
        model.load_parameter_arrays(ckpt.parameters)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        start = ckpt.epoch
        log.info("resuming from %s (epoch %d)", last, start)
    n = len(dataset)
    steps = (n + cfg.batch_size - 1) // cfg.batch_size
    if max_steps_per_epoch is not None:
        steps = min(steps, max_steps_per_epoch)
    logf = open(log_path, "a") if log_path else None
    result = TrainResult([], [], start)
    t0 = time.perf_counter()
    model.train()
    try:
        global_step = start * steps
        for epoch in range(start, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            running = 0.0
            for s in range(steps):
                for g in optimizer.param_groups:
                    g["lr"] = _lr_at(cfg, epoch, s, steps)
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                total, lf, ld = train_step(model, optimizer, dataset.batch(idx), weights,
                                           cfg.per_sample_threshold, cfg.grad_clip)
                running += total
                global_step += 1
                if logf and (global_step % cfg.log_every == 0):
                    ms = (time.perf_counter() - t0) * 1000
                    logf.write(f"{epoch} {global_step} {total:.8g} {lf:.8g} {ld:.8g} {ms:.0f}\n")
                    logf.flush()
            result.epoch_losses.append(running / steps)
            log.info("epoch %d loss %.6g", epoch, result.epoch_losses[-1])
            if ckpt_dir is not None:
                path = ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt"
                save_checkpoint(path, make_checkpoint(model, norm, epoch + 1, optimizer,
                                                      extra={"train_config": cfg.to_dict(paths=False)}))
                result.checkpoints.append(path)
    finally:
        if logf:
            logf.close()
    return result
