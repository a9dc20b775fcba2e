"""Raster types, normalization, input windows, FDC raster I/O and synthetic scenes.

Rasters are numpy arrays in row-major ``(H, W)`` / ``(H, W, C)`` layout.
Flows are pixel displacements, depths are meters with 0 marking an invalid
measurement.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError, OutOfRangeError

log = logging.getLogger(__name__)

DEPTH_CAP = 150.0
DEFAULT_FPS = 17.0


def _as_raster(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2 or a.size == 0:
        raise InvalidArgumentError(f"expected a nonempty 2-D raster, got shape {a.shape}", )
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return a


@dataclass
class FlowField:
    """Per-pixel ``(u, v)`` displacement in pixels, defined on the target frame grid."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = _as_raster(self.u, "u")
        self.v = _as_raster(self.v, "v")
        if self.u.shape != self.v.shape:
            raise InvalidArgumentError(f"u shape {self.u.shape} != v shape {self.v.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def from_array(cls, a) -> "FlowField":
        a = np.asarray(a)
        if a.ndim != 3 or a.shape[-1] != 2:
            raise InvalidArgumentError(f"flow array must be (H, W, 2), got {a.shape}")
        return cls(a[..., 0], a[..., 1])

    @classmethod
    def constant(cls, shape: tuple[int, int], u: float, v: float) -> "FlowField":
        return cls(np.full(shape, u, np.float32), np.full(shape, v, np.float32))


@dataclass
class DepthMap:
    """Metric depth in meters; 0 marks an invalid pixel."""

    d: np.ndarray

    def __post_init__(self):
        self.d = _as_raster(self.d, "depth")
        if np.any(self.d < 0):
            raise InvalidArgumentError("depth values must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


@dataclass
class InstanceMask:
    """Object mask. Binary masks hold exactly 0.0/1.0, warped ones may be fractional."""

    values: np.ndarray
    instance_id: int = 0
    frame_index: int = 0

    def __post_init__(self):
        self.values = _as_raster(self.values, "mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.values))


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length: float
    baseline: float

    def __post_init__(self):
        if not (self.focal_length > 0 and self.baseline > 0):
            raise InvalidArgumentError("focal_length and baseline must be strictly positive")


@dataclass(frozen=True)
class NormalizationParams:
    flow_min: float = -1.0
    flow_max: float = 1.0
    depth_cap: float = DEPTH_CAP

    def __post_init__(self):
        if not self.flow_min < self.flow_max:
            raise InvalidArgumentError(f"flow_min {self.flow_min} must be < flow_max {self.flow_max}")
        if not self.depth_cap > 0:
            raise InvalidArgumentError("depth_cap must be > 0")


class ClampCounter:
    """Counts flow values clamped into the normalization range."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            self.count += int(n)
            log.warning("clamped %d flow values outside the normalization range", n)

    def reset(self) -> None:
        self.count = 0


FLOW_CLAMPS = ClampCounter()


def disparity_to_depth(disparity, cam: CameraIntrinsics) -> DepthMap:
    """Depth = focal_length * baseline / disparity; zero or invalid disparity gives 0."""
    disp = np.asarray(disparity, dtype=np.float64)
    if disp.ndim != 2 or disp.size == 0:
        raise InvalidArgumentError(f"disparity must be a nonempty 2-D raster, got shape {disp.shape}")
    valid = np.isfinite(disp) & (disp > 0)
    depth = np.zeros(disp.shape, np.float64)
    depth[valid] = cam.focal_length * cam.baseline / disp[valid]
    return DepthMap(depth)


def normalize_depth(d: DepthMap, p: NormalizationParams) -> np.ndarray:
    return np.minimum(d.d.astype(np.float64), p.depth_cap) / p.depth_cap


def denormalize_depth(n, p: NormalizationParams) -> DepthMap:
    n = np.asarray(n, dtype=np.float64)
    if n.size and (n.min() < 0 or n.max() > 1):
        raise InvalidArgumentError("normalized depth must lie in [0, 1]")
    return DepthMap(n * p.depth_cap)


def normalize_flow(f: FlowField, p: NormalizationParams, counter: ClampCounter | None = FLOW_CLAMPS) -> np.ndarray:
    """Affine map of ``[flow_min, flow_max]`` onto ``[-1, 1]``, shape ``(H, W, 2)``.

    Values outside the range are clamped and tallied in ``counter``.
    """
    a = f.as_array().astype(np.float64)
    outside = np.count_nonzero((a < p.flow_min) | (a > p.flow_max))
    if outside:
        a = np.clip(a, p.flow_min, p.flow_max)
        if counter is not None:
            counter.add(outside)
    return 2.0 * (a - p.flow_min) / (p.flow_max - p.flow_min) - 1.0


def denormalize_flow(n, p: NormalizationParams) -> FlowField:
    n = np.asarray(n, dtype=np.float64)
    if n.size and (n.min() < -1 or n.max() > 1):
        raise InvalidArgumentError("normalized flow must lie in [-1, 1]")
    return FlowField.from_array((n + 1.0) * 0.5 * (p.flow_max - p.flow_min) + p.flow_min)


def stack_frame(flow: FlowField, depth: DepthMap, p: NormalizationParams) -> np.ndarray:
    """Normalized ``(H, W, 3)`` model frame ``(u, v, d)``."""
    if flow.shape != depth.shape:
        raise InvalidArgumentError(f"flow shape {flow.shape} != depth shape {depth.shape}")
    return np.concatenate([normalize_flow(flow, p), normalize_depth(depth, p)[..., None]], axis=-1).astype(np.float32)


@dataclass
class InputWindow:
    """``T`` consecutive normalized frames, array shape ``(T, H, W, 3)``."""

    frames: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidArgumentError(f"window must be (T, H, W, 3), got {self.frames.shape}")
        flow, depth = self.frames[..., :2], self.frames[..., 2]
        if flow.min() < -1 or flow.max() > 1 or depth.min() < 0 or depth.max() > 1:
            raise InvalidArgumentError("window values outside the normalized ranges")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1:3]


def build_window(sequence: Sequence[tuple[FlowField, DepthMap]], t: int, T: int, p: NormalizationParams) -> InputWindow:
    """Normalized frames ``t-T+1 .. t`` of ``sequence`` in temporal order."""
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if t < T - 1:
        raise OutOfRangeError(f"t={t} leaves fewer than T={T} frames of history")
    if t >= len(sequence):
        raise OutOfRangeError(f"t={t} beyond sequence of length {len(sequence)}")
    frames = [stack_frame(f, d, p) for f, d in sequence[t - T + 1:t + 1]]
    if len({fr.shape for fr in frames}) != 1:
        raise InvalidArgumentError("frames in a window must share one shape")
    return InputWindow(np.stack(frames), t=t)


def _resize(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    x = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    x = x.permute(2, 0, 1)[None] if x.ndim == 3 else x[None, None]
    y = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)[0]
    return y.permute(1, 2, 0).numpy() if a.ndim == 3 else y[0].numpy()


def resize_depth(d: DepthMap, size: tuple[int, int]) -> DepthMap:
    return DepthMap(_resize(d.d, size))


def resize_flow(f: FlowField, size: tuple[int, int]) -> FlowField:
    """Bilinear resize; u and v are rescaled with the width and height ratios."""
    h, w = f.shape
    out = _resize(f.as_array(), size)
    out[..., 0] *= size[1] / w
    out[..., 1] *= size[0] / h
    return FlowField.from_array(out)


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SceneObject:
    """Axis-aligned rectangle moving with an integer velocity at fixed depth."""

    x: int
    y: int
    width: int
    height: int
    vx: int
    vy: int
    depth: float
    z: float | None = None  # drawing order, larger on top; None means nearer on top

    @property
    def order_key(self) -> float:
        return -self.depth if self.z is None else self.z


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 128
    objects: tuple[SceneObject, ...] = ()
    background_depth: float = 80.0
    background_depth_bottom: float | None = None
    background_velocity: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class SceneParams:
    """Ranges for randomly drawn scenes."""

    height: int = 64
    width: int = 128
    min_objects: int = 2
    max_objects: int = 4
    min_size: tuple[int, int] = (10, 14)  # (height, width)
    max_size: tuple[int, int] = (22, 34)
    max_speed: tuple[int, int] = (1, 3)  # (|vy|, |vx|) upper bounds, px/frame
    depth_range: tuple[float, float] = (5.0, 60.0)
    background_depth: tuple[float, float] = (70.0, 110.0)
    ground_depth: float = 8.0


@dataclass
class SyntheticSequence:
    frames: list[tuple[FlowField, DepthMap, list[InstanceMask]]]
    scene_spec: SceneSpec
    seed: int

    def __len__(self):
        return len(self.frames)

    def pairs(self) -> list[tuple[FlowField, DepthMap]]:
        return [(f, d) for f, d, _ in self.frames]

    def masks(self, k: int) -> list[InstanceMask]:
        return self.frames[k][2]


def random_scene_spec(rng: np.random.Generator, params: SceneParams = SceneParams()) -> SceneSpec:
    n = int(rng.integers(params.min_objects, params.max_objects + 1))
    objects = []
    for _ in range(n):
        h = int(rng.integers(params.min_size[0], params.max_size[0] + 1))
        w = int(rng.integers(params.min_size[1], params.max_size[1] + 1))
        h, w = min(h, params.height), min(w, params.width)
        objects.append(SceneObject(
            x=int(rng.integers(0, params.width - w + 1)),
            y=int(rng.integers(0, params.height - h + 1)),
            width=w,
            height=h,
            vx=int(rng.integers(-params.max_speed[1], params.max_speed[1] + 1)),
            vy=int(rng.integers(-params.max_speed[0], params.max_speed[0] + 1)),
            depth=float(np.round(rng.uniform(*params.depth_range), 2)),
        ))
    return SceneSpec(
        height=params.height,
        width=params.width,
        objects=tuple(objects),
        background_depth=float(np.round(rng.uniform(*params.background_depth), 2)),
        background_depth_bottom=params.ground_depth,
    )


def _background_depth(spec: SceneSpec) -> np.ndarray:
    if spec.background_depth_bottom is None:
        col = np.full(spec.height, spec.background_depth)
    else:
        col = np.linspace(spec.background_depth, spec.background_depth_bottom, spec.height)
    return np.repeat(col[:, None], spec.width, axis=1)


def render_frame(spec: SceneSpec, k: int) -> tuple[FlowField, DepthMap, list[InstanceMask]]:
    """Frame ``k``: topmost-object flow, depth and visible instance masks."""
    H, W = spec.height, spec.width
    u = np.full((H, W), spec.background_velocity[0], np.float32)
    v = np.full((H, W), spec.background_velocity[1], np.float32)
    depth = _background_depth(spec).astype(np.float32)
    owner = np.full((H, W), -1, np.int64)
    order = sorted(range(len(spec.objects)), key=lambda i: (spec.objects[i].order_key, i))
    for i in order:
        o = spec.objects[i]
        x0, y0 = o.x + o.vx * k, o.y + o.vy * k
        xs, xe = max(x0, 0), min(x0 + o.width, W)
        ys, ye = max(y0, 0), min(y0 + o.height, H)
        if xs >= xe or ys >= ye:
            continue
        u[ys:ye, xs:xe] = o.vx
        v[ys:ye, xs:xe] = o.vy
        depth[ys:ye, xs:xe] = o.depth
        owner[ys:ye, xs:xe] = i
    masks = [InstanceMask((owner == i).astype(np.float32), instance_id=i, frame_index=k) for i in range(len(spec.objects))]
    return FlowField(u, v), DepthMap(depth), masks


def synth_scene(seed: int, spec: SceneSpec | SceneParams | None = None, length: int = 16) -> SyntheticSequence:
    """Generate a constant-velocity rectangle scene.

    ``spec`` may be a fixed :class:`SceneSpec`, or :class:`SceneParams` from
    which a scene is drawn with ``seed``.
    """
    if length < 1:
        raise InvalidArgumentError("length must be >= 1")
    if spec is None or isinstance(spec, SceneParams):
        spec = random_scene_spec(np.random.default_rng(seed), spec or SceneParams())
    for o in spec.objects:
        if o.x < 0 or o.y < 0 or o.x + o.width > spec.width or o.y + o.height > spec.height:
            raise InvalidArgumentError(f"object {o} outside the image at frame 0")
        if not (math.isfinite(o.depth) and o.depth >= 3.0):
            raise InvalidArgumentError("object depths must be finite and >= 3 m")
    return SyntheticSequence([render_frame(spec, k) for k in range(length)], spec, seed)


def flow_range(sequences: Iterable[Sequence[tuple[FlowField, DepthMap]]]) -> tuple[float, float]:
    """Global (min, max) over u and v of every frame; ``(nan, nan)`` when empty.

    A constant field has no spread to normalize by, so it gets a unit margin
    on both sides.
    """
    lo, hi = math.inf, -math.inf
    for seq in sequences:
        for f, _ in seq:
            lo = min(lo, float(f.u.min()), float(f.v.min()))
            hi = max(hi, float(f.u.max()), float(f.v.max()))
    if lo > hi:
        return math.nan, math.nan
    if lo == hi:
        return lo - 1.0, hi + 1.0
    return lo, hi


# ---------------------------------------------------------------------------
# FDC raster format

MAGIC = b"FDCR"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_MAX_ELEMENTS = 1 << 31


def _raster_array(raster) -> np.ndarray:
    if isinstance(raster, FlowField):
        return raster.as_array()
    if isinstance(raster, DepthMap):
        return raster.d[..., None]
    if isinstance(raster, InstanceMask):
        return raster.values[..., None]
    a = np.asarray(raster, dtype=np.float32)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise InvalidArgumentError(f"raster must be 2-D or 3-D, got shape {a.shape}")
    return a


def write_raster(path, raster) -> None:
    a = np.ascontiguousarray(_raster_array(raster), dtype="<f4")
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h, w, c))
        fh.write(a.tobytes())


def read_raster(path) -> np.ndarray:
    """Read an FDC raster as a float32 ``(H, W, C)`` array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"file is {len(data)} bytes, shorter than the header", "header")
    magic, version, h, w, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"expected {MAGIC!r}, got {magic!r}", "magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    if h == 0 or w == 0 or c == 0 or h * w * c >= _MAX_ELEMENTS:
        raise FormatError(f"invalid shape H={h} W={w} C={c}", "shape")
    n = h * w * c
    payload = len(data) - _HEADER.size
    if payload != 4 * n:
        raise FormatError(f"expected {4 * n} payload bytes, found {payload}", "payload")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)


def read_flow(path) -> FlowField:
    a = read_raster(path)
    if a.shape[-1] != 2:
        raise FormatError(f"flow raster needs C=2, got C={a.shape[-1]}", "C")
    return FlowField.from_array(a)


def read_depth(path) -> DepthMap:
    a = read_raster(path)
    if a.shape[-1] != 1:
        raise FormatError(f"depth raster needs C=1, got C={a.shape[-1]}", "C")
    return DepthMap(a[..., 0])


def read_mask(path, instance_id: int = 0, frame_index: int = 0) -> InstanceMask:
    a = read_raster(path)
    if a.shape[-1] != 1:
        raise FormatError(f"mask raster needs C=1, got C={a.shape[-1]}", "C")
    return InstanceMask(a[..., 0], instance_id, frame_index)


# ---------------------------------------------------------------------------
# Dataset directories


@dataclass
class Manifest:
    flow_min: float
    flow_max: float
    depth_cap: float = DEPTH_CAP
    fps: float = DEFAULT_FPS
    resolution: tuple[int, int] = (64, 128)
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def norm_params(self) -> NormalizationParams:
        return NormalizationParams(self.flow_min, self.flow_max, self.depth_cap)


MANIFEST_NAME = "manifest"


def write_manifest(root, m: Manifest) -> None:
    lines = [
        f"flow_min = {m.flow_min!r}",
        f"flow_max = {m.flow_max!r}",
        f"depth_cap = {m.depth_cap!r}",
        f"fps = {m.fps!r}",
        f"resolution = {m.resolution[0]}x{m.resolution[1]}",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(m.extra.items())]
    Path(root, MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(root) -> Manifest:
    path = Path(root, MANIFEST_NAME)
    if not path.is_file():
        raise FormatError(f"no manifest in {root}", "manifest")
    kv = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n} is not key = value", "manifest")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    try:
        h, w = (int(s) for s in kv.pop("resolution").lower().split("x"))
        return Manifest(
            flow_min=float(kv.pop("flow_min")),
            flow_max=float(kv.pop("flow_max")),
            depth_cap=float(kv.pop("depth_cap", DEPTH_CAP)),
            fps=float(kv.pop("fps", DEFAULT_FPS)),
            resolution=(h, w),
            extra=kv,
        )
    except KeyError as e:
        raise FormatError("missing key", e.args[0]) from None
    except ValueError as e:
        raise FormatError(str(e), "manifest") from None


def write_sequence(directory, pairs: Sequence[tuple[FlowField, DepthMap]], masks: Sequence[Sequence[InstanceMask]] | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    for k, (f, d) in enumerate(pairs):
        write_raster(Path(directory, f"flow_{k:04d}.fdcr"), f)
        write_raster(Path(directory, f"depth_{k:04d}.fdcr"), d)
        for m in (masks[k] if masks is not None else ()):
            write_raster(Path(directory, f"mask_{k:04d}_{m.instance_id:02d}.fdcr"), m)


def list_sequences(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("flow_*.fdcr")))


def load_sequence(directory) -> list[tuple[FlowField, DepthMap]]:
    directory = Path(directory)
    flows = sorted(directory.glob("flow_*.fdcr"))
    pairs = []
    for k, fp in enumerate(flows):
        if fp.name != f"flow_{k:04d}.fdcr":
            raise FormatError(f"frame numbering gap at {fp.name}", "layout")
        dp = directory / f"depth_{k:04d}.fdcr"
        if not dp.is_file():
            raise FormatError(f"missing {dp.name}", "layout")
        pairs.append((read_flow(fp), read_depth(dp)))
    return pairs


def load_masks(directory) -> dict[int, list[InstanceMask]]:
    """Instance masks keyed by frame index, sorted by instance id."""
    out: dict[int, list[InstanceMask]] = {}
    for p in sorted(Path(directory).glob("mask_*_*.fdcr")):
        _, k, i = p.stem.split("_")
        out.setdefault(int(k), []).append(read_mask(p, int(i), int(k)))
    return out
