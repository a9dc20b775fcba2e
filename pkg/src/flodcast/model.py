"""FLODCAST network: shared per-frame UNet, ConvLSTM aggregation, flow and depth heads.

Public tensors are channels-last to match the raster format: windows are
``(B, T, H, W, 3)``, predictions ``(B, K, H, W, 2)`` and ``(B, K, H, W, 1)``.
The building blocks (``unet_features``, ``recurrent_encode``) work on NCHW
tensors like any torch layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigurationError, InvalidArgumentError

VARIANTS = ("full", "no_flow", "no_depth")


@dataclass(frozen=True)
class ModelConfig:
    T: int = 3
    K: int = 3
    unet_widths: tuple[int, ...] = (64, 128, 256, 512, 1024)
    head_widths: tuple[int, ...] = (32, 16, 8)
    feature_channels: int = 64
    recurrent_hidden_channels: int = 64
    input_resolution: tuple[int, int] = (128, 256)
    # input channels zeroed for the modality ablations
    variant: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "unet_widths", tuple(int(w) for w in self.unet_widths))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        object.__setattr__(self, "input_resolution", tuple(int(s) for s in self.input_resolution))
        if self.T < 1 or self.K < 1:
            raise ConfigurationError("T and K must be >= 1")
        widths = self.unet_widths + self.head_widths + (self.feature_channels, self.recurrent_hidden_channels)
        if not self.unet_widths or min(widths) < 1:
            raise ConfigurationError("all widths must be positive")
        factor = 2 ** (len(self.unet_widths) - 1)
        h, w = self.input_resolution
        if h % factor or w % factor or h < 1 or w < 1:
            raise ConfigurationError(f"resolution {h}x{w} must be divisible by {factor}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset used by the acceptance runs."""
        base = dict(unet_widths=(8, 16, 32, 64, 128), feature_channels=8,
                    recurrent_hidden_channels=8, input_resolution=(64, 128))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(conv3x3(cin, cout), nn.ReLU(), conv3x3(cout, cout), nn.ReLU())


class UNet(nn.Module):
    """Encoder-decoder with skip connections; output keeps the input resolution."""

    def __init__(self, in_channels: int, widths, out_channels: int):
        super().__init__()
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(DoubleConv(c, w))
            c = w
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ConvTranspose2d(c, w, 2, stride=2))
            self.merge.append(DoubleConv(2 * w, w))
            c = w
        self.out = conv3x3(c, out_channels)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([skips.pop(), up(x)], dim=1))
        return self.out(x)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = conv3x3(in_channels + hidden_channels, 4 * hidden_channels)

    def forward(self, x, state):
        h, c = state
        i, f, g, o = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def _head(cin: int, widths, cout: int) -> nn.Sequential:
    layers = []
    for w in widths:
        layers += [conv3x3(cin, w), nn.ReLU()]
        cin = w
    layers.append(conv3x3(cin, cout))
    return nn.Sequential(*layers)


class FlodCast(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int | None = 0):
        super().__init__()
        self.config = config
        self.unet = UNet(3, config.unet_widths, config.feature_channels)
        self.lstm = ConvLSTMCell(config.feature_channels, config.recurrent_hidden_channels)
        self.flow_net = _head(config.recurrent_hidden_channels, config.head_widths, 2 * config.K)
        self.depth_net = _head(config.recurrent_hidden_channels, config.head_widths, config.K)
        if seed is not None:
            init_params(self, seed)

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def K(self) -> int:
        return self.config.K

    def unet_features(self, frames: torch.Tensor) -> torch.Tensor:
        """``(N, 3, H, W)`` frames to ``(N, feature_channels, H, W)`` features."""
        return self.unet(frames)

    def recurrent_encode(self, features: torch.Tensor) -> torch.Tensor:
        """Run the ConvLSTM over ``(B, T, C, H, W)`` from zero state; return the last hidden state."""
        if features.ndim != 5:
            raise InvalidArgumentError(f"expected (B, T, C, H, W) features, got {tuple(features.shape)}")
        b, t, _, h, w = features.shape
        hidden = features.new_zeros(b, self.lstm.hidden_channels, h, w)
        state = (hidden, torch.zeros_like(hidden))
        for step in range(t):
            state = self.lstm(features[:, step], state)
        return state[0]

    def flow_head(self, hidden: torch.Tensor) -> torch.Tensor:
        b, _, h, w = hidden.shape
        out = torch.tanh(self.flow_net(hidden))
        return out.view(b, self.K, 2, h, w).permute(0, 1, 3, 4, 2)

    def depth_head(self, hidden: torch.Tensor) -> torch.Tensor:
        out = torch.sigmoid(self.depth_net(hidden))
        return out.unsqueeze(-1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.T or x.shape[-1] != 3:
            raise InvalidArgumentError(f"expected (B, {self.T}, H, W, 3) window, got {tuple(x.shape)}")
        if tuple(x.shape[2:4]) != self.config.input_resolution:
            raise InvalidArgumentError(
                f"window resolution {tuple(x.shape[2:4])} != configured {self.config.input_resolution}")
        if self.config.variant == "no_flow":
            x = torch.cat([torch.zeros_like(x[..., :2]), x[..., 2:]], dim=-1)
        elif self.config.variant == "no_depth":
            x = torch.cat([x[..., :2], torch.zeros_like(x[..., 2:])], dim=-1)
        b, t, h, w, _ = x.shape
        frames = x.permute(0, 1, 4, 2, 3).reshape(b * t, 3, h, w)
        feats = self.unet_features(frames).view(b, t, -1, h, w)
        return self.recurrent_encode(feats)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, T, H, W, 3)`` window to ``(flows, depths)``, both normalized."""
        hidden = self.encode(x)
        return self.flow_head(hidden), self.depth_head(hidden)

    @torch.no_grad()
    def predict(self, frames) -> tuple[np.ndarray, np.ndarray]:
        """Numpy convenience wrapper; accepts ``(T, H, W, 3)`` or a batch of windows."""
        x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
        single = x.ndim == 4
        if single:
            x = x[None]
        flows, depths = (a.numpy() for a in self(x))
        return (flows[0], depths[0]) if single else (flows, depths)

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) ^ set(arrays)
        if missing:
            raise InvalidArgumentError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in own.items():
            if tuple(arrays[k].shape) != tuple(v.shape):
                raise InvalidArgumentError(f"{k}: shape {arrays[k].shape} != {tuple(v.shape)}")
        self.load_state_dict({k: torch.from_numpy(np.array(a, dtype=np.float32)) for k, a in arrays.items()})


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Seeded fan-in scaled uniform init (He bound before ReLU, LeCun bound elsewhere); zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    convs = [m for m in module.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
    relu_fed = set()
    for seq in module.modules():
        if isinstance(seq, nn.Sequential):
            kids = list(seq)
            for a, b in zip(kids, kids[1:]):
                if isinstance(b, nn.ReLU):
                    relu_fed.add(id(a))
    for m in module.modules():
        if isinstance(m, UNet):
            relu_fed.update(id(u) for u in m.up)
    with torch.no_grad():
        for m in convs:
            kh, kw = m.kernel_size
            fan_in = (m.in_channels if isinstance(m, nn.ConvTranspose2d) else m.in_channels * kh * kw)
            bound = math.sqrt((6.0 if id(m) in relu_fed else 3.0) / fan_in)
            m.weight.uniform_(-bound, bound, generator=gen)
            if m.bias is not None:
                m.bias.zero_()
    return module


@dataclass
class PredictionBlock:
    """K normalized flows ``(..., K, H, W, 2)`` and depths ``(..., K, H, W, 1)``."""

    flows: np.ndarray
    depths: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flows.shape[-1] != 2 or self.depths.shape[-1] != 1:
            raise InvalidArgumentError("flows must end in 2 channels and depths in 1")
        if tuple(self.flows.shape[:-1]) != tuple(self.depths.shape[:-1]):
            raise InvalidArgumentError(f"flow {self.flows.shape} and depth {self.depths.shape} blocks disagree")

    @property
    def K(self) -> int:
        return self.flows.shape[-4]


def make_checkpoint(model: FlodCast, norm_params, epoch: int = 0, optimizer=None, extra: dict | None = None):
    from .checkpoint import Checkpoint

    return Checkpoint(
        config=model.config.to_dict(),
        parameters=model.parameter_arrays(),
        epoch=epoch,
        norm_params=norm_params,
        optimizer_state=None if optimizer is None else optimizer.state_dict(),
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ckpt, config: ModelConfig | None = None) -> FlodCast:
    """Rebuild the network stored in ``ckpt``; ``config`` must match if given."""
    try:
        stored = ModelConfig.from_dict(ckpt.config)
    except (TypeError, ConfigurationError) as e:
        raise CheckpointError(f"stored model config is invalid: {e}") from e
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match requested {config}")
    model = FlodCast(stored, seed=None)
    try:
        model.load_parameter_arrays(ckpt.parameters)
    except InvalidArgumentError as e:
        raise CheckpointError(str(e)) from e
    return model
