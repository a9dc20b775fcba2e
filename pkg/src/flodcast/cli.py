"""Command-line entry point: ``flodcast <subcommand> ...``.

Exit codes: 0 success, 2 bad arguments or configuration, 3 missing or
malformed data, 4 any other runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    FlowField,
    Manifest,
    NormalizationParams,
    SceneParams,
    build_window,
    flow_range,
    list_sequences,
    load_masks,
    load_sequence,
    read_flow,
    read_manifest,
    synth_scene,
    write_manifest,
    write_raster,
    write_sequence,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    EmptyReportError,
    FlodcastError,
    FormatError,
    InvalidArgumentError,
)
from .evaluation import evaluate_forecaster
from .losses import LossWeights
from .metrics import format_key_value, rows_to_csv
from .model import FlodCast, ModelConfig, model_from_checkpoint
from .rollout import CopyLast, autoregress
from .segmentation import (
    DAEConfig,
    DenoisingAutoencoder,
    binarize,
    dae_forward,
    evaluate_masks,
    forecast_pairs,
    train_dae_schedule,
    warp_chain,
)
from .trainer import TrainConfig, WindowDataset, train

log = logging.getLogger("flodcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
CONFIG_NAME = "config.json"
RESOLVED_NAME = "resolved_config.json"


class UsageError(FlodcastError):
    pass


class DataError(FlodcastError):
    pass


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(s) for s in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_dataset(root) -> tuple[Manifest, list[Path]]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return read_manifest(root), list_sequences(root)


# ---------------------------------------------------------------------------
# Run configuration

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"dataset_root", "checkpoint_dir"}
_NORM_KEYS = {f.name for f in fields(NormalizationParams)}
_PATH_KEYS = {"dataset", "checkpoint_dir", "log"}
SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "norm": _NORM_KEYS, "paths": _PATH_KEYS}
TOP_KEYS = {"preset"} | set(SECTIONS)


def parse_run_config(text: str) -> dict:
    """Parse a JSON run configuration, rejecting unknown sections and keys."""
    try:
        cfg = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in SECTIONS.items():
        body = cfg.setdefault(section, {})
        if not isinstance(body, dict):
            raise ConfigurationError(f"section {section!r} must be an object")
        bad = set(body) - allowed
        if bad:
            raise ConfigurationError(f"unknown keys in {section!r}: {sorted(bad)}")
    if cfg.setdefault("preset", "tiny") not in ("tiny", "default"):
        raise ConfigurationError("preset must be 'tiny' or 'default'")
    return cfg


def apply_overrides(cfg: dict, args) -> dict:
    """Flags win over the file; ``--set section.key=json`` reaches any field."""
    direct = {
        ("train", "epochs"): args.epochs,
        ("train", "learning_rate"): args.learning_rate,
        ("train", "batch_size"): args.batch_size,
        ("train", "seed"): args.seed,
        ("train", "log_every"): args.log_every,
        ("model", "variant"): args.variant,
        ("model", "T"): args.T,
        ("model", "K"): args.K,
        ("paths", "dataset"): args.dataset,
        ("paths", "checkpoint_dir"): args.checkpoint_dir,
    }
    for (section, key), value in direct.items():
        if value is not None:
            cfg[section][key] = value
    if args.resolution is not None:
        cfg["model"]["input_resolution"] = list(args.resolution)
    if args.preset is not None:
        cfg["preset"] = args.preset
    for item in args.set or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS or key not in SECTIONS[section]:
            raise ConfigurationError(f"unknown config field {dotted!r}")
        try:
            cfg[section][key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[section][key] = raw
    return cfg


def build_configs(cfg: dict, manifest: Manifest) -> tuple[ModelConfig, TrainConfig, NormalizationParams]:
    model_kw = dict(cfg["model"])
    model_kw.setdefault("input_resolution", list(manifest.resolution))
    try:
        mc = ModelConfig.tiny(**model_kw) if cfg["preset"] == "tiny" else ModelConfig(**model_kw)
        train_kw = dict(cfg["train"])
        if "loss_weights" in train_kw:
            train_kw["loss_weights"] = LossWeights(**train_kw["loss_weights"])
        train_kw.setdefault("batch_size", 4)
        tc = TrainConfig(**train_kw)
        norm = replace(manifest.norm_params, **cfg["norm"])
    except TypeError as e:
        raise ConfigurationError(str(e)) from None
    return mc, tc, norm


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not (out / "manifest").is_file():
        raise UsageError(f"{out} is not empty and is not a dataset; refusing to overwrite")
    h, w = args.resolution
    sy, sx = h / 64, w / 128
    params = SceneParams(
        height=h,
        width=w,
        min_size=(max(1, round(10 * sy)), max(1, round(14 * sx))),
        max_size=(max(1, round(22 * sy)), max(1, round(34 * sx))),
    )
    seqs = [synth_scene(args.seed + i, params, length=args.length) for i in range(args.num_sequences)]
    if args.length < args.T + args.K:
        log.warning("length %d < T+K = %d: sequences are written but yield no training windows",
                    args.length, args.T + args.K)
    lo, hi = flow_range([s.pairs() for s in seqs])
    norm = NormalizationParams() if np.isnan(lo) else NormalizationParams(lo, hi)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob("seq_*"):
        shutil.rmtree(old)
    for i, s in enumerate(seqs):
        write_sequence(out / f"seq_{i:04d}", s.pairs(), [masks for _, _, masks in s.frames])
    extra = {"seed": str(args.seed), "num_sequences": str(args.num_sequences), "length": str(args.length)}
    write_manifest(out, Manifest(norm.flow_min, norm.flow_max, norm.depth_cap, resolution=(h, w), extra=extra))
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    cfg = apply_overrides(parse_run_config(text), args)
    paths = cfg["paths"]
    if not paths.get("dataset"):
        raise UsageError("no dataset given (--dataset or paths.dataset)")
    if not paths.get("checkpoint_dir"):
        raise UsageError("no checkpoint directory given (--checkpoint-dir or paths.checkpoint_dir)")
    manifest, seq_dirs = _load_dataset(paths["dataset"])
    mc, tc, norm = build_configs(cfg, manifest)
    sequences = [load_sequence(d) for d in seq_dirs]
    ds = WindowDataset(sequences, mc.T, mc.K, norm)
    if len(ds) == 0:
        raise DataError(f"dataset {paths['dataset']} has no sequence of at least T+K = {mc.T + mc.K} frames")
    if ds.resolution != mc.input_resolution:
        raise ConfigurationError(f"dataset resolution {ds.resolution} != model resolution {mc.input_resolution}")

    ckpt_dir = Path(paths["checkpoint_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if args.config:
        _write(ckpt_dir / CONFIG_NAME, text)
    _write(ckpt_dir / RESOLVED_NAME, json.dumps(
        {"preset": cfg["preset"], "model": mc.to_dict(), "train": tc.to_dict(paths=False),
         "norm": asdict(norm), "paths": paths}, indent=1, sort_keys=True) + "\n")
    tc = replace(tc, dataset_root=str(paths["dataset"]), checkpoint_dir=str(ckpt_dir))
    model = FlodCast(mc, seed=tc.seed)
    log_path = paths.get("log") or ckpt_dir / "train.log"
    result = train(model, ds, tc, norm, resume=args.resume, log_path=log_path)
    for e, loss in enumerate(result.epoch_losses, result.start_epoch):
        print(f"epoch {e} loss {loss:.6g}")
    if result.checkpoints:
        print(f"final checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _forecaster(args):
    """Model and normalization from ``--checkpoint`` or ``--baseline``."""
    if args.baseline == "copy-last":
        return CopyLast(args.T, args.T), None
    if not args.checkpoint:
        raise UsageError("give --checkpoint or --baseline copy-last")
    ckpt = load_checkpoint(args.checkpoint, kind="flodcast")
    model = model_from_checkpoint(ckpt)
    model.eval()
    return model, ckpt.norm_params


def cmd_evaluate(args) -> int:
    manifest, seq_dirs = _load_dataset(args.dataset)
    model, norm = _forecaster(args)
    norm = norm or manifest.norm_params
    if not seq_dirs:
        raise DataError(f"dataset {args.dataset} has no sequences")
    sequences = [load_sequence(d) for d in seq_dirs]
    res = evaluate_forecaster(model, sequences, norm, args.horizon,
                              windows_per_sequence=args.windows_per_sequence,
                              clamp_pred_depth=args.clamp_pred_depth,
                              allow_mixed_window=args.allow_mixed_window)
    out = Path(args.report_out)
    rows = [s.row() for s in res.steps]
    _write(out / "steps.csv", rows_to_csv(rows))
    lines = [f"source = {args.baseline or Path(args.checkpoint).name!r}\n",
             f"horizon = {args.horizon}\n", f"windows = {res.windows}\n"]
    for s in res.steps:
        lines.append(format_key_value(s.flow, f"step{s.step:02d}."))
        if s.depth is not None:
            lines.append(format_key_value(s.depth, f"step{s.step:02d}."))
    final = res.steps[-1]
    lines.append(format_key_value(final.flow, "final."))
    if final.depth is not None:
        lines.append(format_key_value(final.depth, "final."))
    _write(out / "report.txt", "".join(lines))
    for name, h in res.histograms.items():
        hrows = [{"lo": lo, "hi": hi, "error": e, "count": n}
                 for lo, hi, e, n in zip(h.bin_edges[:-1], h.bin_edges[1:], h.per_bin_error, h.per_bin_count)]
        _write(out / f"hist_{name}.csv", rows_to_csv(hrows))
    print("step  epe       mse_mean  abs_rel")
    for s in res.steps:
        ar = f"{s.depth.abs_rel:.5f}" if s.depth is not None else "n/a"
        print(f"t+{s.step:<3d} {s.flow.epe:.5f}  {s.flow.mse_mean:.5f}  {ar}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    seq_dir = Path(args.sequence)
    if not seq_dir.is_dir():
        raise DataError(f"sequence directory {seq_dir} does not exist")
    model, norm = _forecaster(args)
    if norm is None:
        norm = read_manifest(seq_dir.parent).norm_params
    seq = load_sequence(seq_dir)
    t = args.t if args.t is not None else model.T - 1
    if not model.T - 1 <= t < len(seq):
        raise InvalidArgumentError(f"--t must lie in [{model.T - 1}, {len(seq) - 1}]")
    res = autoregress(model, build_window(seq, t, model.T, norm), args.horizon, norm, args.allow_mixed_window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, (f, d) in enumerate(zip(res.flows, res.depths), 1):
        # named by absolute frame so the directory can feed refine-masks --flows
        write_raster(out / f"flow_{t + k:04d}.fdcr", f)
        write_raster(out / f"depth_{t + k:04d}.fdcr", d)
    print(f"wrote {res.horizon} predicted frames ({res.rounds} rounds) to {out}")
    return EXIT_OK


def _load_dae(path) -> DenoisingAutoencoder:
    ckpt = load_checkpoint(path, kind="dae")
    try:
        dae = DenoisingAutoencoder(DAEConfig(**ckpt.config), seed=None)
        dae.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.parameters.items()})
    except (TypeError, RuntimeError, ConfigurationError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    dae.eval()
    return dae


def cmd_refine_masks(args) -> int:
    masks_dir, flows_dir = Path(args.masks), Path(args.flows)
    for d in (masks_dir, flows_dir):
        if not d.is_dir():
            raise DataError(f"directory {d} does not exist")
    if args.dae_checkpoint is None and not args.no_dae:
        raise UsageError("give --dae-checkpoint or --no-dae")
    if args.dae_checkpoint is not None and not Path(args.dae_checkpoint).is_file():
        raise DataError(f"DAE checkpoint {args.dae_checkpoint} does not exist")
    dae = _load_dae(args.dae_checkpoint) if args.dae_checkpoint else None
    masks = load_masks(masks_dir)
    t, n = args.start_frame, args.horizon
    if t not in masks:
        raise DataError(f"no masks for frame {t} in {masks_dir}")
    flow_paths = [flows_dir / f"flow_{k:04d}.fdcr" for k in range(t + 1, t + n + 1)]
    missing = [p.name for p in flow_paths if not p.is_file()]
    if missing:
        raise DataError(f"missing flows in {flows_dir}: {missing}")
    flows = [read_flow(p) for p in flow_paths]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = []
    for m in masks[t]:
        warped = warp_chain(m, flows)
        write_raster(out / f"warped_{t + n:04d}_{m.instance_id:02d}.fdcr", warped)
        if dae is not None:
            refined = binarize(dae_forward(dae, warped.values), dae.config.binarize_threshold)
        else:
            refined = binarize(warped)
        write_raster(out / f"refined_{t + n:04d}_{m.instance_id:02d}.fdcr", refined)
        preds.append(refined)
    gt = masks.get(t + n)
    report = evaluate_masks(preds, gt) if gt is not None else {"mean_iou": None, "ap50": None}
    report = {"frame": t + n, **report}
    _write(out / "report.txt", "".join(f"{k} = {v!r}\n" for k, v in report.items()))
    _write(out / "report.csv", rows_to_csv([report]))
    print("".join(f"{k} = {v}\n" for k, v in report.items()), end="")
    return EXIT_OK


def cmd_train_dae(args) -> int:
    manifest, seq_dirs = _load_dataset(args.dataset)
    if not seq_dirs:
        raise DataError(f"dataset {args.dataset} has no sequences")
    model, norm = (None, None)
    if args.checkpoint or args.baseline:
        model, norm = _forecaster(args)
        norm = norm or manifest.norm_params
    rng = np.random.default_rng(args.seed)
    phases = []
    for horizon in (args.short_horizon, args.mid_horizon):
        pairs = []
        for d in seq_dirs:
            seq, masks = load_sequence(d), load_masks(d)
            T = model.T if model is not None else 1
            for t in range(T - 1, len(seq) - horizon, args.stride):
                if model is not None:
                    flows = autoregress(model, build_window(seq, t, T, norm), horizon, norm).flows
                else:
                    flows = [f for f, _ in seq[t + 1:t + 1 + horizon]]
                pairs += forecast_pairs(masks.get(t, []), masks.get(t + horizon, []), flows, args.noise, rng)
        if not pairs:
            raise DataError(f"no mask pairs at horizon {horizon}")
        phases.append(pairs)
    dae = DenoisingAutoencoder(DAEConfig(), seed=args.seed)
    history = train_dae_schedule(dae, phases[0], phases[1], tuple(args.epochs), args.learning_rate,
                                 args.batch_size, args.seed)
    save_checkpoint(args.out, Checkpoint(
        config=dae.config.to_dict(),
        parameters={k: v.detach().numpy() for k, v in dae.state_dict().items()},
        epoch=sum(args.epochs),
        kind="dae",
        extra={"history": history, "noise": args.noise},
    ))
    for e, loss in enumerate(history):
        print(f"epoch {e} mse {loss:.6g}")
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(s: str) -> float:
    return float(s) if s not in ("", None) else float("nan")


def cmd_report(args) -> int:
    dirs = [Path(p) for p in args.reports or ()]
    for d in dirs:
        if not (d / "steps.csv").is_file():
            raise DataError(f"{d} holds no steps.csv (not an evaluate output)")
    if not dirs:
        raise EmptyReportError("no reports given")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    combined = []
    meta = {"Software": None}
    for metric in ("epe", "mse_mean", "abs_rel"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for d in dirs:
            rows = _read_csv(d / "steps.csv")
            if metric not in rows[0]:
                continue
            ax.plot([int(r["step"]) for r in rows], [_num(r[metric]) for r in rows], marker="o", label=d.name)
        ax.set_xlabel("step (t+k)")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"steps_{metric}.png", metadata=meta)
        plt.close(fig)
    for d in dirs:
        for r in _read_csv(d / "steps.csv"):
            combined.append({"source": d.name, **r})
    _write(out / "steps.csv", rows_to_csv(combined))
    for name in ("abs_rel", "epe"):
        present = [d for d in dirs if (d / f"hist_{name}.csv").is_file()]
        if not present:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        width = 0.8 / len(present)
        table = []
        for i, d in enumerate(present):
            rows = _read_csv(d / f"hist_{name}.csv")
            labels = [f"{float(r['lo']):g}-{float(r['hi']):g}" for r in rows]
            ax.bar(np.arange(len(rows)) + i * width, [_num(r["error"]) for r in rows], width, label=d.name)
            table += [{"source": d.name, **r} for r in rows]
        ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2, labels, rotation=45, fontsize=7)
        ax.set_xlabel("ground-truth distance (m)")
        ax.set_ylabel(f"{name} at final step")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"hist_{name}.png", metadata=meta)
        plt.close(fig)
        _write(out / f"hist_{name}.csv", rows_to_csv(table))
    print(f"wrote plots for {len(dirs)} report(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_forecaster_args(p) -> None:
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["copy-last"])
    p.add_argument("--T", type=_positive, default=3, help="window length for the baseline")
    p.add_argument("--allow-mixed-window", action="store_true",
                   help="permit T != K rollouts that mix observed and predicted frames")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flodcast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-sequences", type=_non_negative, default=10)
    p.add_argument("--length", type=_positive, default=16)
    p.add_argument("--resolution", type=_resolution, default=(64, 128))
    p.add_argument("--seed", type=int, default=0, help="sequence i uses seed + i")
    p.add_argument("--T", type=_positive, default=3)
    p.add_argument("--K", type=_positive, default=3)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a forecaster")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--preset", choices=["tiny", "default"])
    p.add_argument("--epochs", type=_positive)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=_positive)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=_positive)
    p.add_argument("--variant", choices=["full", "no_flow", "no_depth"])
    p.add_argument("--T", type=_positive)
    p.add_argument("--K", type=_positive)
    p.add_argument("--resolution", type=_resolution)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score rollouts against ground truth")
    _add_forecaster_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--horizon", type=_positive, default=10, help="5 (short term) or 10 (mid term)")
    p.add_argument("--report-out", required=True)
    p.add_argument("--windows-per-sequence", type=_positive)
    p.add_argument("--clamp-pred-depth", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rollout", help="write predicted frames for one window")
    _add_forecaster_args(p)
    p.add_argument("--sequence", required=True)
    p.add_argument("--t", type=int, help="last observed frame (default T-1)")
    p.add_argument("--horizon", type=_positive, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("refine-masks", help="warp instance masks and refine them")
    p.add_argument("--masks", required=True, help="sequence directory holding mask rasters")
    p.add_argument("--flows", required=True, help="directory holding flow_NNNN rasters")
    p.add_argument("--start-frame", type=_non_negative, default=0)
    p.add_argument("--horizon", type=_positive, default=3)
    p.add_argument("--dae-checkpoint")
    p.add_argument("--no-dae", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine_masks)

    p = sub.add_parser("train-dae", help="train the mask denoising autoencoder")
    _add_forecaster_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=_non_negative, nargs=2, default=[3, 3])
    p.add_argument("--short-horizon", type=_positive, default=3)
    p.add_argument("--mid-horizon", type=_positive, default=9)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--stride", type=_positive, default=1)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--batch-size", type=_positive, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_dae)

    p = sub.add_parser("report", help="plot evaluate outputs")
    p.add_argument("--reports", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("FLODCAST_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"flodcast: FLODCAST_THREADS={threads!r} is not an integer", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError, ConfigurationError) as e:
        print(f"flodcast {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, CheckpointError, EmptyReportError, FileNotFoundError) as e:
        print(f"flodcast {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"flodcast {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
