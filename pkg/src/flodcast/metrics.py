"""Depth and flow forecasting metrics, evaluation masks and distance-binned errors."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import DepthMap, FlowField
from .errors import EmptyReportError, InvalidArgumentError

EVAL_DEPTH_CAP = 80.0
CROP_BOTTOM_FRACTION = 0.2
DELTA_BASE = 1.25
DEFAULT_BINS = (3.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 60.0, 80.0, 150.0)
PRED_DEPTH_FLOOR = 1e-6


@dataclass
class DepthReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixel_count: int


@dataclass
class FlowReport:
    mse_u: float
    mse_v: float
    mse_mean: float
    epe: float


@dataclass
class DistanceHistogram:
    bin_edges: list[float]
    per_bin_error: list[float | None]  # None marks an empty bin
    per_bin_count: list[int]
    metric: str = "abs_rel"


def _arr(x) -> np.ndarray:
    if isinstance(x, DepthMap):
        return x.d.astype(np.float64)
    if isinstance(x, FlowField):
        return x.as_array().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def depth_eval_mask(gt, cap: float = EVAL_DEPTH_CAP, crop_bottom_fraction: float = CROP_BOTTOM_FRACTION) -> np.ndarray:
    """Valid, within ``cap`` meters, and above the cropped bottom band."""
    if cap <= 0:
        raise InvalidArgumentError("cap must be > 0")
    if not 0 <= crop_bottom_fraction < 1:
        raise InvalidArgumentError("crop_bottom_fraction must lie in [0, 1)")
    g = _arr(gt)
    rows = np.arange(g.shape[0])[:, None]
    return (g > 0) & (g <= cap) & (rows < (1 - crop_bottom_fraction) * g.shape[0])


def evaluate_depth(pred, gt, mask=None, clamp_pred: bool = False) -> DepthReport:
    """Depth metrics over ``mask`` (all positive-gt pixels when ``mask`` is None)."""
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    m = (g > 0) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != g.shape:
        raise InvalidArgumentError("mask shape does not match")
    if not m.any():
        raise EmptyReportError("no valid pixels under the evaluation mask")
    y, yh = g[m], p[m]
    if np.any(y <= 0):
        raise InvalidArgumentError("ground truth must be positive under the mask")
    if clamp_pred:
        yh = np.where(yh == 0, PRED_DEPTH_FLOOR, yh)
    if np.any(yh <= 0):
        raise InvalidArgumentError("predicted depth must be positive under the mask")
    diff = y - yh
    d = np.log(yh) - np.log(y)
    ratio = np.maximum(y / yh, yh / y)
    return DepthReport(
        abs_rel=float(np.mean(np.abs(diff) / y)),
        sq_rel=float(np.mean(diff ** 2 / y)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        # variance of the log difference; clip tiny negative round-off
        rmse_log=float(max(np.mean(d ** 2) - np.mean(d) ** 2, 0.0)),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE ** 2)),
        delta3=float(np.mean(ratio < DELTA_BASE ** 3)),
        valid_pixel_count=int(m.sum()),
    )


def evaluate_flow(pred, gt) -> FlowReport:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    diff = p - g
    mse_u = float(np.mean(diff[..., 0] ** 2))
    mse_v = float(np.mean(diff[..., 1] ** 2))
    return FlowReport(
        mse_u=mse_u,
        mse_v=mse_v,
        mse_mean=(mse_u + mse_v) / 2,
        epe=float(np.mean(np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2))),
    )


def per_pixel_error(pred, gt, metric: str) -> np.ndarray:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    if metric == "abs_rel":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(g - p) / g
    if metric == "epe":
        return np.sqrt(((p - g) ** 2).sum(axis=-1))
    raise InvalidArgumentError(f"unknown metric {metric!r}")


def error_by_distance(pred, gt, gt_depth, metric: str = "abs_rel", bin_edges=DEFAULT_BINS, mask=None) -> DistanceHistogram:
    """Mean per-pixel error inside each ``[lo, hi)`` ground-truth depth bin."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidArgumentError("bin edges must be strictly ascending with at least two entries")
    err = per_pixel_error(pred, gt, metric)
    depth = _arr(gt_depth)
    if depth.shape != err.shape:
        raise InvalidArgumentError("gt_depth is not aligned with the prediction")
    valid = depth > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EmptyReportError("no valid pixels to bin")
    errors, counts = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = valid & (depth >= lo) & (depth < hi)
        n = int(sel.sum())
        counts.append(n)
        errors.append(float(err[sel].mean()) if n else None)
    return DistanceHistogram(edges.tolist(), errors, counts, metric)


def merge_histograms(hists: list[DistanceHistogram]) -> DistanceHistogram:
    """Pool several frames' histograms, weighting each bin by its pixel count."""
    if not hists:
        raise EmptyReportError("no histograms to merge")
    edges = hists[0].bin_edges
    totals = np.zeros(len(edges) - 1)
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    for h in hists:
        if h.bin_edges != edges:
            raise InvalidArgumentError("histograms use different bins")
        for i, (e, n) in enumerate(zip(h.per_bin_error, h.per_bin_count)):
            if n:
                totals[i] += e * n
                counts[i] += n
    errs = [float(t / n) if n else None for t, n in zip(totals, counts)]
    return DistanceHistogram(list(edges), errs, counts.tolist(), hists[0].metric)


def mean_reports(reports):
    """Uniform average over frames of a list of same-typed reports."""
    if not reports:
        raise EmptyReportError("no reports to average")
    cls = type(reports[0])
    out = {}
    for f in fields(cls):
        vals = [getattr(r, f.name) for r in reports]
        out[f.name] = int(sum(vals)) if f.name == "valid_pixel_count" else float(np.mean(vals))
    return cls(**out)


def format_key_value(report, prefix: str = "") -> str:
    return "".join(f"{prefix}{k} = {v!r}\n" for k, v in asdict(report).items())


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None or (isinstance(v, float) and math.isnan(v)) else v) for k, v in r.items()})
    return buf.getvalue()
