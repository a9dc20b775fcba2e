"""Central finite-difference check of the total loss against autograd.

ReLU and max-pool make the network piecewise smooth, so a stencil of
+-step can straddle a kink and the difference quotient then measures a
blend of two slopes. Every probe records the ReLU sign pattern and the
max-pool argmax of both stencil points; probes where they differ are
reported as straddling and checked separately at a smaller step.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from flodcast.losses import LossWeights, berhu_elementwise, berhu_threshold, total_loss
from flodcast.model import FlodCast, ModelConfig


class KinkRecorder:
    def __init__(self, model):
        self.patterns = []
        self._handles = [m.register_forward_hook(self._relu) for m in model.modules() if isinstance(m, nn.ReLU)]
        self._pool = F.max_pool2d

    def _relu(self, module, inputs, output):
        self.patterns.append(inputs[0] > 0)

    def _max_pool(self, x, kernel_size, *args, **kwargs):
        out, idx = self._pool(x, kernel_size, return_indices=True)
        self.patterns.append(idx)
        return out

    def __enter__(self):
        F.max_pool2d = self._max_pool
        return self

    def __exit__(self, *exc):
        F.max_pool2d = self._pool
        for h in self._handles:
            h.remove()

    def take(self):
        out, self.patterns = self.patterns, []
        return out


def setup(seed=0, resolution=None):
    """Tiny float64 model, random inputs, targets with residuals bounded away from 0 and c."""
    cfg = ModelConfig.tiny() if resolution is None else ModelConfig.tiny(input_resolution=resolution)
    model = FlodCast(cfg, seed=seed + 3).double()
    rng = np.random.default_rng(seed)
    h, w = cfg.input_resolution
    x = torch.as_tensor(np.concatenate([rng.uniform(-1, 1, (1, 3, h, w, 2)), rng.uniform(0, 1, (1, 3, h, w, 1))], -1))
    with torch.no_grad():
        pf, pd = model(x)

    def residuals(shape):
        mag = np.where(rng.random(shape) < 0.5, rng.uniform(0.05, 0.15, shape), rng.uniform(0.3, 1.0, shape))
        mag.flat[0] = 1.0  # pins c at 0.2
        return torch.as_tensor(mag * rng.choice([-1.0, 1.0], shape))

    return model, x, pf - residuals(pf.shape), pd - residuals(pd.shape), rng


def run(entries_per_tensor=4, step=1e-4, fallback_steps=(1e-6, 1e-7, 1e-8), seed=0, resolution=None):
    """Returns a list of ``(name, index, analytic, fd, straddles, fd_fallback)`` probes.

    ``fd_fallback`` is the quotient at the largest fallback step whose
    stencil is kink-free, or None when the probe is smooth at ``step`` or
    no fallback step is.
    """
    model, x, gf, gd, rng = setup(seed, resolution)
    w = LossWeights()
    model.zero_grad()
    total_loss(model(x), (gf, gd), w).backward()
    with torch.no_grad():
        pf, pd = model(x)
        cf, cd = berhu_threshold(pf - gf), berhu_threshold(pd - gd)

    def fixed_c_loss():
        # the threshold is a constant of differentiation, so it stays fixed here too
        f, d = model(x)
        return float(w.alpha * berhu_elementwise(f - gf, cf).mean() + w.beta * berhu_elementwise(d - gd, cd).mean())

    def quotient(flat, i, h, rec):
        orig = flat[i].item()
        flat[i] = orig + h
        up, pu = fixed_c_loss(), rec.take()
        flat[i] = orig - h
        down, pdn = fixed_c_loss(), rec.take()
        flat[i] = orig
        same = all(torch.equal(a, b) for a, b in zip(pu, pdn))
        return (up - down) / (2 * h), not same

    probes = []
    with torch.no_grad(), KinkRecorder(model) as rec:
        for name, p in model.named_parameters():
            g = p.grad.flatten()
            flat = p.data.view(-1)
            picks = rng.choice(len(g), min(entries_per_tensor, len(g)), replace=False)
            for i in picks.tolist():
                fd, straddles = quotient(flat, i, step, rec)
                fb = None
                for h in fallback_steps if straddles else ():
                    q, still = quotient(flat, i, h, rec)
                    if not still:
                        fb = q
                        break
                probes.append((name, i, g[i].item(), fd, straddles, fb))
    return probes


def rel_err(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale
