"""Per-step forecasting evaluation over a set of sequences."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import DepthMap, FlowField, NormalizationParams, resize_depth, resize_flow, stack_frame
from .errors import EmptyReportError
from .metrics import (
    DEFAULT_BINS,
    DepthReport,
    DistanceHistogram,
    FlowReport,
    depth_eval_mask,
    error_by_distance,
    evaluate_depth,
    evaluate_flow,
    mean_reports,
    merge_histograms,
)
from .rollout import rollout_normalized


@dataclass
class StepReport:
    step: int
    flow: FlowReport
    depth: DepthReport | None

    def row(self) -> dict:
        row = {"step": self.step}
        row.update(asdict(self.flow))
        if self.depth is not None:
            row.update(asdict(self.depth))
        return row


@dataclass
class EvaluationResult:
    steps: list[StepReport]
    histograms: dict[str, DistanceHistogram]
    windows: int

    def step(self, k: int) -> StepReport:
        return self.steps[k - 1]


def evaluation_windows(lengths, T: int, horizon: int, per_sequence: int | None = None) -> list[tuple[int, int]]:
    """``(sequence, t)`` pairs with ``T`` frames of history and ``horizon`` frames of ground truth."""
    out = []
    for s, n in enumerate(lengths):
        ts = list(range(T - 1, n - horizon))
        out += [(s, t) for t in (ts if per_sequence is None else ts[:per_sequence])]
    return out


def _denorm_flow(a: np.ndarray, p: NormalizationParams) -> np.ndarray:
    return (a.astype(np.float64) + 1.0) * 0.5 * (p.flow_max - p.flow_min) + p.flow_min


def evaluate_forecaster(model, sequences, norm: NormalizationParams, horizon: int, *,
                        windows_per_sequence: int | None = None, eval_scale: int = 1,
                        clamp_pred_depth: bool = False, allow_mixed_window: bool = False,
                        batch_size: int = 16, bins=DEFAULT_BINS) -> EvaluationResult:
    """Roll ``model`` out from every evaluation window and score each future step.

    Flow metrics use denormalized pixel flows; depth metrics use the masked
    protocol of :func:`depth_eval_mask`. Reports are averaged uniformly over
    frames. Distance histograms cover the final step.
    """
    T = model.T
    windows = evaluation_windows([len(s) for s in sequences], T, horizon, windows_per_sequence)
    if not windows:
        raise EmptyReportError(f"no sequence has {T} + {horizon} frames")
    stacked = {}
    flow_reports = [[] for _ in range(horizon)]
    depth_reports = [[] for _ in range(horizon)]
    hist_abs, hist_epe = [], []
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        x = []
        for s, t in chunk:
            if s not in stacked:
                stacked[s] = np.stack([stack_frame(f, d, norm) for f, d in sequences[s]])
            x.append(stacked[s][t - T + 1:t + 1])
        flows, depths, _ = rollout_normalized(model, np.stack(x), horizon, allow_mixed_window)
        for b, (s, t) in enumerate(chunk):
            for k in range(horizon):
                gt_flow, gt_depth = sequences[s][t + 1 + k]
                pf = _denorm_flow(flows[b, k], norm)
                pd = depths[b, k, ..., 0].astype(np.float64) * norm.depth_cap
                gf, gd = gt_flow.as_array(), gt_depth.d
                if eval_scale != 1:
                    size = (gd.shape[0] * eval_scale, gd.shape[1] * eval_scale)
                    pf = resize_flow(FlowField.from_array(pf), size).as_array()
                    gf = resize_flow(gt_flow, size).as_array()
                    pd = resize_depth(DepthMap(pd), size).d
                    gd = resize_depth(gt_depth, size).d
                flow_reports[k].append(evaluate_flow(pf, gf))
                mask = depth_eval_mask(gd)
                if mask.any():
                    depth_reports[k].append(evaluate_depth(pd, gd, mask, clamp_pred=clamp_pred_depth))
                if k == horizon - 1 and mask.any():
                    hist_abs.append(error_by_distance(pd, gd, gd, "abs_rel", bins, mask=mask))
                    hist_epe.append(error_by_distance(pf, gf, gd, "epe", bins))
    steps = [StepReport(k + 1, mean_reports(flow_reports[k]),
                        mean_reports(depth_reports[k]) if depth_reports[k] else None)
             for k in range(horizon)]
    hists = {}
    if hist_abs:
        hists = {"abs_rel": merge_histograms(hist_abs), "epe": merge_histograms(hist_epe)}
    return EvaluationResult(steps, hists, len(windows))

