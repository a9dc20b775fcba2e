"""Naive per-pixel reference implementations, written independently of flodcast.metrics."""

import math


def depth_metrics(pred, gt, mask):
    n = 0
    abs_rel = sq_rel = sq = 0.0
    logs = []
    inl = [0, 0, 0]
    for i in range(len(gt)):
        for j in range(len(gt[0])):
            if not mask[i][j]:
                continue
            y, yh = float(gt[i][j]), float(pred[i][j])
            n += 1
            abs_rel += abs(y - yh) / y
            sq_rel += (y - yh) ** 2 / y
            sq += (y - yh) ** 2
            logs.append(math.log(yh) - math.log(y))
            delta = max(y / yh, yh / y)
            for k, tau in enumerate((1.25, 1.25 ** 2, 1.25 ** 3)):
                inl[k] += delta < tau
    s1 = sum(logs)
    s2 = sum(d * d for d in logs)
    return {
        "abs_rel": abs_rel / n,
        "sq_rel": sq_rel / n,
        "rmse": math.sqrt(sq / n),
        "rmse_log": s2 / n - (s1 / n) ** 2,
        "delta1": inl[0] / n,
        "delta2": inl[1] / n,
        "delta3": inl[2] / n,
    }


def flow_metrics(pred, gt):
    h, w = len(gt), len(gt[0])
    su = sv = se = 0.0
    for i in range(h):
        for j in range(w):
            du = float(pred[i][j][0]) - float(gt[i][j][0])
            dv = float(pred[i][j][1]) - float(gt[i][j][1])
            su += du * du
            sv += dv * dv
            se += math.sqrt(du * du + dv * dv)
    return {"mse_u": su / (h * w), "mse_v": sv / (h * w), "epe": se / (h * w)}


def berhu_scalar(x, c):
    if abs(x) <= abs(c):
        return abs(x)
    return (x * x + c * c) / (2 * c)
