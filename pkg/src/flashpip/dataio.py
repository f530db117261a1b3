"""Synthetic stereo pairs, PFM disparity files, and model checkpoints.

Scenes are layered textured rectangles at integer disparities over a textured
background; the right view is the left view with every surface shifted left
by its disparity (x_right = x_left - d), so non-occluded pixels satisfy
left[y][x] == right[y][x - gt[y][x]] exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .model import ModelConfig, RefineModel
from .tensor import Tensor


class CheckpointError(Exception):
    """Raised for malformed, truncated, or version-mismatched checkpoints."""


CHECKPOINT_MAGIC = b"FPCK"
CHECKPOINT_VERSION = 1


@dataclass
class StereoSample:
    left: Tensor          # [1,1,H,W] grayscale in [0,1]
    right: Tensor
    gt_disparity: Tensor  # [1,1,H,W] pixels
    seed: int


def _value_noise(rng, H, W, cell=6, contrast=0.35, base=0.5):
    """Seeded value noise: coarse random grid, bilinear upsample."""
    gh, gw = H // cell + 2, W // cell + 2
    grid = rng.uniform(-1.0, 1.0, (gh, gw))
    ys = np.arange(H) / cell
    xs = np.arange(W) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tex = (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
           + grid[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
           + grid[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
           + grid[np.ix_(y0 + 1, x0 + 1)] * fy * fx)
    return np.clip(base + contrast * tex, 0.0, 1.0).astype(np.float32)


def generate_scene(seed: int, H: int = 64, W: int = 96, d_max: int = 16,
                   n_layers: int = 3, layer_disparities=None,
                   bg_disparity: int | None = None,
                   full_frame: bool = False,
                   contrast_scale: float = 1.0) -> StereoSample:
    """Deterministic layered stereo scene with integer ground-truth disparity.

    Disparity overrides exist for constructing exact test cases; by default
    every layer draws its rectangle and disparity from the seeded stream.
    Lower contrast_scale makes surface interiors harder to match, so correct
    disparity has to propagate in from the layer boundaries.
    """
    if H < 32 or W < 32:
        raise ValueError(f"generate_scene: H,W must be >= 32, got {H}x{W}")
    if n_layers < 1:
        raise ValueError(f"generate_scene: n_layers must be >= 1, got {n_layers}")
    rng = np.random.default_rng(seed)

    # background texture is generated d_max columns wider so the right view
    # never runs off its surface
    bg = _value_noise(rng, H, W + d_max, cell=8, contrast=0.3 * contrast_scale)
    d_bg = int(rng.integers(0, max(d_max // 4, 1) + 1)) if bg_disparity is None else int(bg_disparity)

    surfaces = []  # (disparity, y0, y1, x0, x1, texture-over-rect)
    for i in range(n_layers):
        if full_frame:
            y0, y1, x0, x1 = 0, H, 0, W
        else:
            hh = int(rng.integers(H // 4, H // 2 + 1))
            ww = int(rng.integers(W // 4, W // 2 + 1))
            y0 = int(rng.integers(0, H - hh + 1))
            x0 = int(rng.integers(0, W - ww + 1))
            y1, x1 = y0 + hh, x0 + ww
        if layer_disparities is None:
            d = int(rng.integers(0, d_max + 1))
        else:
            d = int(layer_disparities[i])
        if not 0 <= d <= d_max:
            raise ValueError(f"generate_scene: layer disparity {d} outside [0, {d_max}]")
        tex = _value_noise(rng, y1 - y0, x1 - x0, cell=4,
                           contrast=(0.25 + 0.1 * (i % 3)) * contrast_scale,
                           base=rng.uniform(0.3, 0.7))
        surfaces.append((d, y0, y1, x0, x1, tex))

    # paint back to front: larger disparity is closer and wins in both views
    surfaces.sort(key=lambda s: s[0])

    left = np.empty((H, W), dtype=np.float32)
    right = np.empty((H, W), dtype=np.float32)
    gt = np.empty((H, W), dtype=np.float32)
    left[:] = bg[:, :W]
    right[:] = bg[:, d_bg:d_bg + W]
    gt[:] = float(d_bg)
    for d, y0, y1, x0, x1, tex in surfaces:
        left[y0:y1, x0:x1] = tex
        gt[y0:y1, x0:x1] = float(d)
        rx0, rx1 = x0 - d, x1 - d
        tx0 = max(0, -rx0)
        if rx1 > tx0 + rx0:
            right[y0:y1, max(rx0, 0):rx1] = tex[:, tx0:]

    def wrap(a):
        return Tensor(a[None, None])

    return StereoSample(wrap(left), wrap(right), wrap(gt), seed)


def make_dataset(seeds, H=64, W=96, d_max=16, n_layers=3, contrast_scale=1.0):
    return [generate_scene(int(s), H, W, d_max, n_layers,
                           contrast_scale=contrast_scale) for s in seeds]


def stack_samples(samples) -> tuple[Tensor, Tensor, Tensor]:
    """Batch a list of StereoSamples into [B,1,H,W] tensors."""
    left = np.concatenate([s.left.data for s in samples], axis=0)
    right = np.concatenate([s.right.data for s in samples], axis=0)
    gt = np.concatenate([s.gt_disparity.data for s in samples], axis=0)
    return Tensor(left), Tensor(right), Tensor(gt)


def write_manifest(path, seeds) -> None:
    with open(path, "w") as f:
        for s in seeds:
            f.write(f"{int(s)}\n")


def read_manifest(path) -> list[int]:
    with open(path) as f:
        return [int(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# PFM


def pfm_write(disparity, path) -> None:
    """Grayscale PFM: 'Pf' header, negative scale
    (little-endian), rows bottom-to-top."""
    arr = disparity.data if isinstance(disparity, Tensor) else np.asarray(disparity)
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        arr = arr[0, 0]
    elif arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"pfm_write: expected a single-channel map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def pfm_read(path) -> Tensor:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind == b"PF":
            raise ValueError("pfm_read: color PFM (3 channels) not supported, expected 'Pf'")
        if kind != b"Pf":
            raise ValueError(f"pfm_read: bad magic {kind!r}, expected 'Pf'")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"pfm_read: malformed dimensions line {dims!r}")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        fmt = "<f4" if scale < 0 else ">f4"
        payload = f.read(4 * w * h)
        if len(payload) != 4 * w * h:
            raise ValueError(f"pfm_read: truncated payload, expected {4 * w * h} bytes, "
                             f"got {len(payload)}")
        arr = np.frombuffer(payload, dtype=fmt).reshape(h, w)
        return Tensor(np.flipud(arr).copy())


# ---------------------------------------------------------------------------
# checkpoints


def _write_str(f, s: str) -> None:
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what} "
                              f"(wanted {n} bytes, got {len(b)})")
    return b


def _read_str(f, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4, what + " length"))
    return _read_exact(f, n, what).decode("utf-8")


def save_checkpoint(path, model: RefineModel, metadata: dict | None = None) -> None:
    """Versioned binary container: magic, version, JSON metadata, raw tensors."""
    meta = {"config": asdict(model.cfg), "meta": metadata or {}}
    params = model.named_parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(f, json.dumps(meta, sort_keys=True))
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            _write_str(f, name)
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[RefineModel, dict]:
    """Rebuild a model with bitwise-identical parameters, or fail loudly."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint: magic {magic!r} != {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}, "
                                  f"this build reads version {CHECKPOINT_VERSION}")
        meta = json.loads(_read_str(f, "metadata"))
        model = RefineModel(ModelConfig(**meta["config"]))
        params = model.named_parameters()
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        if count != len(params):
            raise CheckpointError(f"checkpoint has {count} tensors, model expects {len(params)}")
        for _ in range(count):
            name = _read_str(f, "tensor name")
            if name not in params:
                raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            want = params[name].data.shape
            if tuple(shape) != want:
                raise CheckpointError(f"parameter {name!r} has shape {shape}, expected {want}")
            n = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(f, 4 * n, f"data for {name!r}")
            params[name].data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return model, meta["meta"]
