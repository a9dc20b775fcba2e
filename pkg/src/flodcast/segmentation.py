"""Segmentation forecasting: flow-warped instance masks refined by a denoising autoencoder.

The warping operator stands in for a learned mask-warping network: a
binary instance at frame ``t`` is carried to ``t + 1`` by backward bilinear
sampling with the flow defined on the target frame.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FlowField, InstanceMask
from .errors import ConfigurationError, EmptyReportError, InvalidArgumentError

log = logging.getLogger(__name__)


def _values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, InstanceMask) else np.asarray(mask, dtype=np.float32)


def bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional ``(sx, sy)``; taps outside the image read 0."""
    h, w = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    wx = (sx - x0).astype(np.float64)
    wy = (sy - y0).astype(np.float64)
    out = np.zeros(sx.shape, np.float64)
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            tap = np.zeros(sx.shape, np.float64)
            tap[inside] = img[yi[inside], xi[inside]]
            out += fx * fy * tap
    return out


def warp_mask(mask, flow: FlowField) -> InstanceMask:
    """out(p) = mask(p - flow(p)), bilinear, zero outside the frame."""
    m = _values(mask)
    if m.shape != flow.shape:
        raise InvalidArgumentError(f"mask shape {m.shape} != flow shape {flow.shape}")
    h, w = m.shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = bilinear_sample(m.astype(np.float64), xx - flow.u.astype(np.float64), yy - flow.v.astype(np.float64))
    iid = mask.instance_id if isinstance(mask, InstanceMask) else 0
    frame = mask.frame_index + 1 if isinstance(mask, InstanceMask) else 1
    return InstanceMask(np.clip(out, 0, 1).astype(np.float32), iid, frame)


def binarize(prob, threshold: float = 0.5) -> InstanceMask:
    """1 where ``prob >= threshold``, else 0."""
    v = _values(prob)
    out = (v >= threshold).astype(np.float32)
    if isinstance(prob, InstanceMask):
        return InstanceMask(out, prob.instance_id, prob.frame_index)
    return InstanceMask(out)


def warp_chain(mask, flows, threshold: float = 0.5) -> InstanceMask:
    """Warp through each flow in turn, re-binarizing between steps."""
    if len(flows) < 1:
        raise InvalidArgumentError("warp_chain needs at least one flow")
    cur = mask if isinstance(mask, InstanceMask) else InstanceMask(mask)
    for i, f in enumerate(flows):
        if i:
            cur = binarize(cur, threshold)
        cur = warp_mask(cur, f)
    return cur


def salt_and_pepper(mask, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace a fraction ``p`` of pixels with 0 or 1 (equal odds)."""
    v = _values(mask).copy()
    hit = rng.random(v.shape) < p
    v[hit] = rng.integers(0, 2, size=int(hit.sum())).astype(np.float32)
    return v


# ---------------------------------------------------------------------------
# Denoising autoencoder


@dataclass(frozen=True)
class DAEConfig:
    encoder_widths: tuple[int, ...] = (32, 64, 128)
    decoder_widths: tuple[int, ...] = (128, 64, 32)
    kernel: int = 3
    binarize_threshold: float = 0.5
    # expected foreground fraction; sets the initial output bias
    foreground_prior: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        if min(self.encoder_widths + self.decoder_widths) < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError("widths must be positive and the kernel odd")
        if len(self.encoder_widths) != len(self.decoder_widths):
            raise ConfigurationError("encoder and decoder need the same number of stages")
        if not 0 < self.binarize_threshold < 1:
            raise ConfigurationError("binarize_threshold must lie in (0, 1)")
        if not 0 < self.foreground_prior < 1:
            raise ConfigurationError("foreground_prior must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class DenoisingAutoencoder(nn.Module):
    def __init__(self, config: DAEConfig = DAEConfig(), seed: int | None = 0):
        super().__init__()
        self.config = config
        pad = config.kernel // 2
        layers, c = [], 1
        for w in config.encoder_widths:
            layers += [nn.Conv2d(c, w, config.kernel, padding=pad), nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.encoder = nn.Sequential(*layers)
        layers = []
        for w in config.decoder_widths:
            layers += [nn.Conv2d(c, w, config.kernel, padding=pad), nn.ReLU(), nn.Upsample(scale_factor=2, mode="nearest")]
            c = w
        self.decoder = nn.Sequential(*layers)
        self.out = nn.Conv2d(c, 1, 3, padding=1)
        if seed is not None:
            from .model import init_params

            init_params(self, seed)
            # start at the background-heavy mean; otherwise the first Adam steps
            # drive the sigmoid into saturation and MSE gradients vanish
            p = config.foreground_prior
            nn.init.constant_(self.out.bias, float(np.log(p / (1 - p))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 1, H, W)`` noisy masks to refined probabilities of the same shape."""
        factor = 2 ** len(self.config.encoder_widths)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ConfigurationError(f"mask resolution {tuple(x.shape[-2:])} must be divisible by {factor}")
        return torch.sigmoid(self.out(self.decoder(self.encoder(x))))


@torch.no_grad()
def dae_forward(dae: DenoisingAutoencoder, noisy) -> np.ndarray:
    """Refine one ``(H, W)`` mask or a ``(B, H, W)`` stack; returns probabilities."""
    x = torch.as_tensor(np.asarray(_values(noisy) if isinstance(noisy, InstanceMask) else noisy, dtype=np.float32))
    squeeze = x.ndim == 2
    x = x[None, None] if squeeze else x[:, None]
    y = dae(x)[:, 0].numpy()
    return y[0] if squeeze else y


def train_dae(dae: DenoisingAutoencoder, pairs, epochs: int, lr: float = 1e-4, batch_size: int = 8,
              seed: int = 0, optimizer: torch.optim.Optimizer | None = None):
    """Per-pixel MSE training on ``(noisy, target)`` mask pairs.

    Returns ``(optimizer, epoch_losses)``; pass the optimizer back in to
    continue with a second phase.
    """
    if not pairs:
        raise InvalidArgumentError("train_dae needs at least one pair")
    x = torch.as_tensor(np.stack([_values(a) for a, _ in pairs]).astype(np.float32))[:, None]
    y = torch.as_tensor(np.stack([_values(b) for _, b in pairs]).astype(np.float32))[:, None]
    if x.shape != y.shape:
        raise InvalidArgumentError("noisy and target masks must align")
    opt = optimizer or torch.optim.Adam(dae.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    dae.train()
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[s:s + batch_size])
            loss = F.mse_loss(dae(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(x))
        log.info("dae epoch %d mse %.5f", epoch, history[-1])
    return opt, history


def train_dae_schedule(dae: DenoisingAutoencoder, short_pairs, mid_pairs, epochs: tuple[int, int] = (3, 3),
                       lr: float = 1e-4, batch_size: int = 8, seed: int = 0) -> list[float]:
    """Short-horizon phase then mid-horizon fine-tuning, sharing one optimizer."""
    opt, h1 = train_dae(dae, short_pairs, epochs[0], lr, batch_size, seed)
    _, h2 = train_dae(dae, mid_pairs, epochs[1], lr, batch_size, seed + 1, optimizer=opt)
    return h1 + h2


def forecast_pairs(masks, future_masks, flows, noise: float = 0.0, rng: np.random.Generator | None = None):
    """Warp each instance at ``t`` through ``flows`` and pair it with the same
    instance at ``t + len(flows)``.

    Instances that are empty at either end are skipped. With ``noise > 0`` the
    warped input is corrupted by salt-and-pepper noise after warping.
    """
    targets = {m.instance_id: m for m in future_masks}
    pairs = []
    for m in masks:
        target = targets.get(m.instance_id)
        if target is None or not m.values.any() or not target.values.any():
            continue
        warped = warp_chain(m, flows).values
        if noise > 0:
            warped = salt_and_pepper(warped, noise, rng if rng is not None else np.random.default_rng(0))
        pairs.append((warped, target.values))
    return pairs


# ---------------------------------------------------------------------------
# Scoring


def mask_iou(a, b) -> float:
    a, b = _values(a) >= 0.5, _values(b) >= 0.5
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def match_instances(preds, gts) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending IoU; returns ``(pred, gt, iou)`` triples."""
    if not preds or not gts:
        return []
    ious = np.array([[mask_iou(p, g) for g in gts] for p in preds])
    pairs = sorted(((ious[i, j], i, j) for i in range(len(preds)) for j in range(len(gts))),
                   key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, out = set(), set(), []
    for iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, float(iou)))
    return out


def evaluate_masks(pred_masks, gt_masks, iou_threshold: float = 0.5) -> dict:
    """Mean IoU of matched instances and confidence-free AP50 (precision x recall).

    Both arguments are per-frame lists of masks, or a flat list for one frame.
    Empty masks are ignored. Scores are None when there is nothing to score.
    """
    if pred_masks and not isinstance(pred_masks[0], (list, tuple)):
        pred_masks, gt_masks = [pred_masks], [gt_masks]
    if len(pred_masks) != len(gt_masks):
        raise InvalidArgumentError("prediction and ground-truth frame counts differ")
    tp = fp = fn = 0
    ious = []
    for preds, gts in zip(pred_masks, gt_masks):
        preds = [p for p in preds if np.any(_values(p) >= 0.5)]
        gts = [g for g in gts if np.any(_values(g) >= 0.5)]
        matches = match_instances(preds, gts)
        ious += [m[2] for m in matches]
        hits = sum(m[2] >= iou_threshold for m in matches)
        tp += hits
        fp += len(preds) - hits
        fn += len(gts) - hits
    if tp + fp + fn == 0:
        return {"mean_iou": None, "ap50": None, "tp": 0, "fp": 0, "fn": 0, "matched": 0}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {
        "mean_iou": float(np.mean(ious)) if ious else 0.0,
        "ap50": precision * recall,
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "matched": len(ious),
    }

