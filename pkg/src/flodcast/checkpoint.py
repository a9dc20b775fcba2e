"""Checkpoint archives.

A checkpoint is an uncompressed zip holding ``header.json`` plus one raw
little-endian blob per array::

    header.json                  format, version, kind, config, epoch, norm_params,
                                 parameter index, optimizer index, extra
    params/<name>.bin            model parameter ``<name>`` (float32)
    optimizer/<idx>/<key>.bin    per-parameter optimizer state tensors

Every member is written with a fixed timestamp so identical content gives
byte-identical files.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import NormalizationParams
from .errors import CheckpointError

FORMAT = "flodcast-checkpoint"
FORMAT_VERSION = 1
_EPOCH_TIME = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    config: dict
    parameters: dict[str, np.ndarray]
    epoch: int = 0
    norm_params: NormalizationParams = field(default_factory=NormalizationParams)
    optimizer_state: dict | None = None
    kind: str = "flodcast"
    extra: dict = field(default_factory=dict)


def _put(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH_TIME)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def _blob(a) -> tuple[bytes, dict]:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    a = np.asarray(a)
    dtype = a.dtype.newbyteorder("<")
    return np.ascontiguousarray(a, dtype=dtype).tobytes(), {"shape": list(a.shape), "dtype": dtype.str}


def _unblob(payload: bytes, meta: dict) -> np.ndarray:
    a = np.frombuffer(payload, dtype=np.dtype(meta["dtype"]))
    if a.size != int(np.prod(meta["shape"], dtype=np.int64)):
        raise CheckpointError("blob size does not match its recorded shape")
    return a.reshape(meta["shape"]).copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "epoch": int(ckpt.epoch),
        "norm_params": {
            "flow_min": ckpt.norm_params.flow_min,
            "flow_max": ckpt.norm_params.flow_max,
            "depth_cap": ckpt.norm_params.depth_cap,
        },
        "parameters": {},
        "optimizer": None,
        "extra": ckpt.extra,
    }
    blobs = []
    for name, arr in ckpt.parameters.items():
        payload, meta = _blob(np.asarray(arr, dtype=np.float32))
        header["parameters"][name] = meta
        blobs.append((f"params/{name}.bin", payload))
    if ckpt.optimizer_state is not None:
        opt = {"param_groups": ckpt.optimizer_state["param_groups"], "state": {}}
        # canonical member order, whether the state came from torch or from a loaded archive
        for idx, st in sorted(ckpt.optimizer_state["state"].items(), key=lambda kv: int(kv[0])):
            entry = {}
            for key, val in sorted(st.items()):
                if isinstance(val, (torch.Tensor, np.ndarray)):
                    payload, meta = _blob(val)
                    blobs.append((f"optimizer/{idx}/{key}.bin", payload))
                    entry[key] = {"tensor": meta}
                else:
                    entry[key] = {"value": val}
            opt["state"][str(idx)] = entry
        header["optimizer"] = opt
    with zipfile.ZipFile(tmp, "w") as zf:
        _put(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
        for name, payload in blobs:
            _put(zf, name, payload)
    tmp.replace(path)


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: missing or corrupt header") from e
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} archive")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {header.get('version')} != {FORMAT_VERSION}")
        if kind is not None and header.get("kind") != kind:
            raise CheckpointError(f"{path}: holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
        try:
            params = {name: _unblob(zf.read(f"params/{name}.bin"), meta)
                      for name, meta in header["parameters"].items()}
            opt = None
            if header["optimizer"] is not None:
                opt = {"param_groups": header["optimizer"]["param_groups"], "state": {}}
                for idx, entry in header["optimizer"]["state"].items():
                    st = {}
                    for key, val in entry.items():
                        if "tensor" in val:
                            st[key] = torch.from_numpy(_unblob(zf.read(f"optimizer/{idx}/{key}.bin"), val["tensor"]))
                        else:
                            st[key] = val["value"]
                    opt["state"][int(idx)] = st
        except (KeyError, zipfile.BadZipFile, ValueError) as e:
            raise CheckpointError(f"{path}: corrupt payload ({e})") from e
    return Checkpoint(
        config=header["config"],
        parameters=params,
        epoch=header["epoch"],
        norm_params=NormalizationParams(**header["norm_params"]),
        optimizer_state=opt,
        kind=header["kind"],
        extra=header.get("extra", {}),
    )

