"""Autoregressive rollout: feed the latest predictions back in to reach any horizon.

A forecaster is anything with integer ``T`` and ``K`` attributes and a
``predict(frames)`` method mapping normalized ``(B, T, H, W, 3)`` windows to
``(B, K, H, W, 2)`` flows and ``(B, K, H, W, 1)`` depths. :class:`FlodCast`
models qualify, as does :class:`CopyLast`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FLOW_CLAMPS, ClampCounter, DepthMap, FlowField, InputWindow, NormalizationParams, denormalize_depth, denormalize_flow
from .errors import InvalidArgumentError, UnsupportedConfigurationError


@dataclass
class RolloutResult:
    horizon: int
    flows: list[FlowField]
    depths: list[DepthMap]
    rounds: int
    normalized_flows: np.ndarray  # (horizon, H, W, 2)
    normalized_depths: np.ndarray  # (horizon, H, W, 1)


class CopyLast:
    """Baseline that repeats the last observed frame for every future step."""

    def __init__(self, T: int = 3, K: int = 3):
        self.T, self.K = T, K

    def predict(self, frames):
        frames = np.asarray(frames, dtype=np.float32)
        last = frames[:, -1:] if frames.ndim == 5 else frames[-1:]
        reps = np.repeat(last, self.K, axis=-4)
        return reps[..., :2], reps[..., 2:]


def _feedback(flows: np.ndarray, depths: np.ndarray, counter: ClampCounter | None) -> np.ndarray:
    """Re-stack predictions as input frames, clamping anything outside the input ranges."""
    frames = np.concatenate([flows, depths], axis=-1).astype(np.float32)
    lo = np.array([-1, -1, 0], np.float32)
    hi = np.array([1, 1, 1], np.float32)
    outside = np.count_nonzero((frames < lo) | (frames > hi))
    if outside:
        frames = np.clip(frames, lo, hi)
        if counter is not None:
            counter.add(outside)
    return frames


def rollout_normalized(model, frames, horizon: int, allow_mixed_window: bool = False,
                       counter: ClampCounter | None = FLOW_CLAMPS):
    """Roll ``model`` out in normalized space.

    ``frames`` is one ``(T, H, W, 3)`` window or a batch ``(B, T, H, W, 3)``.
    Returns ``(flows, depths, rounds)`` with a time axis of length ``horizon``
    in place of ``T``. When ``T != K`` the feedback window mixes observed and
    predicted frames, which is only done with ``allow_mixed_window``.
    """
    if horizon < 1:
        raise InvalidArgumentError("horizon must be >= 1")
    T, K = model.T, model.K
    if T != K and horizon > K and not allow_mixed_window:
        raise UnsupportedConfigurationError(f"self-feeding rollout needs T == K (T={T}, K={K})")
    x = np.asarray(frames, dtype=np.float32)
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.shape[1] != T:
        raise InvalidArgumentError(f"window has {x.shape[1]} frames, model expects T={T}")
    history = [x[:, i] for i in range(T)]
    out_f, out_d = [], []
    rounds = 0
    while len(out_f) < horizon:
        window = np.stack(history[-T:], axis=1)
        flows, depths = model.predict(window)
        rounds += 1
        fed = _feedback(flows, depths, counter)
        for k in range(K):
            history.append(fed[:, k])
            out_f.append(flows[:, k])
            out_d.append(depths[:, k])
    flows = np.stack(out_f[:horizon], axis=1)
    depths = np.stack(out_d[:horizon], axis=1)
    if single:
        flows, depths = flows[0], depths[0]
    return flows, depths, rounds


def autoregress(model, window: InputWindow, horizon: int, norm_params: NormalizationParams,
                allow_mixed_window: bool = False) -> RolloutResult:
    frames = window.frames if isinstance(window, InputWindow) else window
    flows, depths, rounds = rollout_normalized(model, frames, horizon, allow_mixed_window)
    assert rounds == math.ceil(horizon / model.K)
    return RolloutResult(
        horizon=horizon,
        flows=[denormalize_flow(f, norm_params) for f in flows],
        depths=[denormalize_depth(d[..., 0], norm_params) for d in depths],
        rounds=rounds,
        normalized_flows=flows,
        normalized_depths=depths,
    )


def predict_at(model, window: InputWindow, k: int, norm_params: NormalizationParams,
               allow_mixed_window: bool = False) -> tuple[FlowField, DepthMap]:
    """Flow and depth ``k`` frames after the window (k = 1 is the first prediction)."""
    res = autoregress(model, window, k, norm_params, allow_mixed_window)
    return res.flows[k - 1], res.depths[k - 1]
