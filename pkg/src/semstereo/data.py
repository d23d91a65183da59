"""Synthetic stereo scenes, raster I/O and the checkpoint container.

Scenes are layered: a background whose disparity ramps smoothly down the
image (rows share one value, so the right view is an exact horizontal
resample) plus textured rectangles and ellipses at distinct constant
disparities, nearer objects painted last. Shape type determines the
semantic class (0 background, 1 rectangles, 2 ellipses). Textures are
band-limited noise so matching is well posed. Everything is drawn from
one seeded PCG64 stream and rendered through the fixed numpy kernel
path, so a seed reproduces a scene bitwise anywhere.

Raster formats follow the KITTI conventions: disparity as 16-bit PNG
storing round(256 * d) with 0 meaning "no measurement", class ids as
8-bit PNG, images as 8-bit RGB PNG.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._kernels import numpy_backend as _fixed

MAX_DISPARITY = 192.0

CHECKPOINT_MAGIC = b"RTS2"
CHECKPOINT_VERSION = 1


class RasterFormatError(ValueError):
    """A raster file does not match its documented format."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


@dataclass
class SceneParams:
    height: int = 64
    width: int = 128
    n_objects: int = 4
    max_disp: float = 48.0
    n_classes: int = 3
    bg_disp: tuple = (2.0, 10.0)

    def validate(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(f"SceneParams: {self.height}x{self.width} must "
                             f"be divisible by 32")
        if not 0 < self.max_disp <= MAX_DISPARITY:
            raise ValueError(f"SceneParams: max_disp {self.max_disp} outside "
                             f"(0, {MAX_DISPARITY}]")
        lo, hi = self.bg_disp
        if not 0 < lo <= hi <= self.max_disp:
            raise ValueError(f"SceneParams: bg_disp {self.bg_disp} must be "
                             f"within (0, max_disp]")
        if self.n_classes < 1:
            raise ValueError("SceneParams: need at least one class")
        if self.n_objects > 0 and self.n_classes < 2:
            raise ValueError("SceneParams: objects need object classes")
        if self.n_objects > 0 and self.max_disp <= hi + 0.5:
            raise ValueError("SceneParams: max_disp leaves no disparity room "
                             "above the background for objects")


@dataclass
class SyntheticSample:
    """One stereo pair with dense ground truth, intensities in [0, 255]."""
    left: np.ndarray        # 3 x H x W float32
    right: np.ndarray       # 3 x H x W float32
    disparity: np.ndarray   # 1 x H x W float32, px at full resolution
    semantics: np.ndarray   # H x W int64 class ids
    occlusion: np.ndarray | None   # H x W bool, invisible in the right view

    def valid_mask(self) -> np.ndarray:
        return self.disparity > 0


def _noise_texture(rng, height, width, lo=25.0, hi=230.0):
    """Band-limited RGB noise: two octaves of upsampled white noise."""
    tex = np.zeros((1, 3, height, width), dtype=np.float32)
    for cell, weight in ((8, 0.6), (2, 0.4)):
        hh = -(-height // cell)
        ww = -(-width // cell)
        base = rng.random((1, 3, hh, ww)).astype(np.float32)
        up = _fixed.upsample_bilinear_fwd(base, cell)
        tex += weight * up[:, :, :height, :width]
    return (lo + tex[0] * (hi - lo)).astype(np.float32)


def _resample_width(tex, x_src):
    """Linear interpolation of each row of ``tex`` at columns ``x_src``."""
    c, h, wt = tex.shape
    x0 = np.floor(x_src).astype(np.int64)
    frac = (x_src - x0).astype(np.float32)
    x0 = np.clip(x0, 0, wt - 1)
    x1 = np.clip(x0 + 1, 0, wt - 1)
    rows = np.arange(h)[:, None]
    return tex[:, rows, x0] * (1 - frac) + tex[:, rows, x1] * frac


class _Shape:
    """Analytic object footprint: evaluable at real coordinates."""

    def __init__(self, kind, cx, cy, ax, ay):
        self.kind = kind
        self.cx, self.cy, self.ax, self.ay = cx, cy, ax, ay

    def contains(self, x, y):
        if self.kind == "rectangle":
            return (np.abs(x - self.cx) <= self.ax) & (np.abs(y - self.cy) <= self.ay)
        return (((x - self.cx) / self.ax) ** 2
                + ((y - self.cy) / self.ay) ** 2) <= 1.0


_SHAPE_KINDS = ("rectangle", "ellipse")


def generate_scene(seed: int, params: SceneParams) -> SyntheticSample:
    """Render one deterministic scene with dense ground truth."""
    params.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    h, w = params.height, params.width
    pad = int(np.ceil(params.max_disp)) + 2
    lo, hi = params.bg_disp

    ys = np.arange(h, dtype=np.float32)
    xs = np.arange(w, dtype=np.float32)
    grid_x = np.broadcast_to(xs, (h, w))
    grid_y = np.broadcast_to(ys[:, None], (h, w))

    # background: row-constant disparity ramp, texture wide enough for
    # the right view to sample without leaving the frame
    bg_tex = _noise_texture(rng, h, w + pad)
    bg_disp = (lo + (hi - lo) * ys / max(h - 1, 1)).astype(np.float32)

    left = bg_tex[:, :, :w].copy()
    disparity = np.broadcast_to(bg_disp[:, None], (h, w)).astype(np.float32).copy()
    semantics = np.zeros((h, w), dtype=np.int64)
    right = _resample_width(bg_tex, grid_x + bg_disp[:, None])

    # objects at distinct constant disparities, far to near
    n_kinds = min(len(_SHAPE_KINDS), params.n_classes - 1)
    shapes = []
    span = params.max_disp - hi
    for i in range(params.n_objects):
        kind = _SHAPE_KINDS[i % max(n_kinds, 1)]
        slot_lo = hi + span * i / params.n_objects
        slot_hi = hi + span * (i + 1) / params.n_objects
        d_obj = float(rng.uniform(slot_lo + 0.25, slot_hi - 0.05)) \
            if slot_hi - slot_lo > 0.5 else float((slot_lo + slot_hi) / 2)
        cx = float(rng.uniform(0.2 * w, 0.8 * w))
        cy = float(rng.uniform(0.2 * h, 0.8 * h))
        ax = float(rng.uniform(0.06, 0.16) * w)
        ay = float(rng.uniform(0.10, 0.25) * h)
        tex = _noise_texture(rng, h, w)
        shape = _Shape(kind, cx, cy, ax, ay)
        cls = 1 + (_SHAPE_KINDS.index(kind) % max(n_kinds, 1))
        shapes.append((shape, d_obj, cls, tex))

        mask = shape.contains(grid_x, grid_y)
        left[:, mask] = tex[:, mask]
        disparity[mask] = d_obj
        semantics[mask] = cls

        # right-view footprint: the full analytic shape shifted by d_obj
        mask_r = shape.contains(grid_x + d_obj, grid_y)
        sampled = _resample_width(tex, grid_x + d_obj)
        right[:, mask_r] = sampled[:, mask_r]

    # left pixel occluded iff it lands outside the right frame or under a
    # nearer object's right-view footprint
    xr = grid_x - disparity
    occlusion = xr < -0.5
    for shape, d_obj, _, _ in shapes:
        nearer = d_obj > disparity + 1e-6
        occlusion |= nearer & shape.contains(xr + d_obj, grid_y)

    return SyntheticSample(left=left, right=right,
                           disparity=disparity[None],
                           semantics=semantics, occlusion=occlusion)


# ---------------------------------------------------------------------------
# rasters

def save_image(path, img) -> None:
    arr = np.clip(np.asarray(img), 0, 255)
    Image.fromarray(arr.transpose(1, 2, 0).astype(np.uint8), "RGB").save(path)


def load_image(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1)


def save_disparity_raster(path, disparity, valid=None) -> None:
    """16-bit PNG storing round(256 * d); 0 marks missing measurements."""
    d = np.asarray(disparity)
    if d.ndim == 3:
        d = d[0]
    q = np.round(d * 256.0)
    if valid is not None:
        v = np.asarray(valid)
        q = np.where(v[0] if v.ndim == 3 else v, q, 0)
    q = np.clip(q, 0, 65535).astype("<u2")
    Image.fromarray(q, mode="I;16").save(path)


def load_disparity_raster(path):
    """Returns (disparity 1xHxW float32, valid 1xHxW bool)."""
    img = Image.open(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise RasterFormatError(f"{path}: expected a 16-bit single-channel "
                                f"raster, got mode {img.mode}")
    arr = np.asarray(img, dtype=np.int64)
    if arr.ndim != 2 or arr.min() < 0 or arr.max() > 65535:
        raise RasterFormatError(f"{path}: values outside the 16-bit range")
    disparity = (arr / 256.0).astype(np.float32)[None]
    return disparity, (arr != 0)[None]


def save_class_raster(path, classes) -> None:
    arr = np.asarray(classes)
    if arr.min() < 0 or arr.max() > 255:
        raise RasterFormatError("class ids must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_class_raster(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        raise RasterFormatError(f"{path}: expected an 8-bit single-channel "
                                f"raster, got mode {img.mode}")
    return np.asarray(img, dtype=np.int64)


# ---------------------------------------------------------------------------
# dataset folders: {split}/{left,right,disp,sem}/NNNNNN.png

_SUBDIRS = ("left", "right", "disp", "sem")


def write_sample(root, split: str, index: int, sample: SyntheticSample) -> None:
    base = Path(root) / split
    for sub in _SUBDIRS:
        (base / sub).mkdir(parents=True, exist_ok=True)
    name = f"{index:06d}.png"
    save_image(base / "left" / name, sample.left)
    save_image(base / "right" / name, sample.right)
    save_disparity_raster(base / "disp" / name, sample.disparity)
    save_class_raster(base / "sem" / name, sample.semantics)


def load_split(root, split: str) -> list:
    """Load every sample of a dataset split into memory."""
    base = Path(root) / split
    left_dir = base / "left"
    if not left_dir.is_dir():
        raise FileNotFoundError(f"no '{split}' split under {root}")
    samples = []
    for left_path in sorted(left_dir.glob("*.png")):
        name = left_path.name
        disparity, valid = load_disparity_raster(base / "disp" / name)
        disparity = np.where(valid, disparity, 0).astype(np.float32)
        samples.append(SyntheticSample(
            left=load_image(left_path),
            right=load_image(base / "right" / name),
            disparity=disparity,
            semantics=load_class_raster(base / "sem" / name),
            occlusion=None))
    if not samples:
        raise FileNotFoundError(f"split '{split}' under {root} is empty")
    return samples


def generate_split(params: SceneParams, count: int, base_seed: int) -> list:
    return [generate_scene(base_seed + i, params) for i in range(count)]


# ---------------------------------------------------------------------------
# checkpoint container

@dataclass
class CheckpointMeta:
    channel_factor: int
    n_classes: int
    step: int
    norm_mean: np.ndarray
    norm_std: np.ndarray


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, "
                              f"got {len(buf)}")
    return buf


def save_checkpoint(path, meta: CheckpointMeta, tensors: dict) -> None:
    """Binary container: magic, version, metadata, named f32 tensors."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IIIQ", CHECKPOINT_VERSION, meta.channel_factor,
                            meta.n_classes, meta.step))
        f.write(np.asarray(meta.norm_mean, dtype="<f4").tobytes())
        f.write(np.asarray(meta.norm_std, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            if arr.dtype != np.float32:
                raise CheckpointError(f"tensor {name}: dtype {arr.dtype}, "
                                      f"checkpoints store float32 only")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<BB", 0, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (meta, tensors); bitwise inverse of save_checkpoint."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected "
                                  f"{CHECKPOINT_MAGIC!r}")
        version, c, n_classes, step = struct.unpack("<IIIQ", _read_exact(f, 20))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, this build "
                                  f"reads version {CHECKPOINT_VERSION}")
        mean = np.frombuffer(_read_exact(f, 12), dtype="<f4").copy()
        std = np.frombuffer(_read_exact(f, 12), dtype="<f4").copy()
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(f, 2))
            if tag != 0:
                raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            n_items = int(np.prod(shape)) if rank else 1
            payload = _read_exact(f, 4 * n_items)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after the tensor table")
    meta = CheckpointMeta(channel_factor=c, n_classes=n_classes, step=step,
                          norm_mean=mean, norm_std=std)
    return meta, tensors
