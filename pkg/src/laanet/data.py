"""Dataset ingestion: split files, frame triplets, crops and depth PNG I/O.

On-disk layout (``kitti_eigen``, ``robotcar`` and ``nuscenes``)::

    <root>/intrinsics.txt                   optional per-camera default "fx fy cx cy"
    <root>/<sequence>/intrinsics.txt        per-sequence override
    <root>/<sequence>/<image_dir>/<index>.png
    <root>/<sequence>/<depth_dir>/<index>.png   optional ground truth, uint16, metres*256

The ``synthetic`` layout is the scene export of :mod:`laanet.synth`: one
directory per scene holding ``image.png`` (target), ``source_0.png``,
``source_1.png``, ``depth.png`` and ``intrinsics.txt``.

Split files list one ``<relative sequence path> <frame index>`` per line.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .geometry import Intrinsics

log = logging.getLogger(__name__)

DEPTH_SCALE = 256.0


@dataclass(frozen=True)
class Layout:
    image_dir: str
    depth_dir: str
    index_width: int
    crop: tuple  # (width, height)


LAYOUTS = {
    "kitti_eigen": Layout("image_02/data", "proj_depth", 10, (1024, 320)),
    "robotcar": Layout("stereo/left", "depth", 6, (1152, 672)),
    "nuscenes": Layout("CAM_FRONT", "depth", 6, (1536, 768)),
    "synthetic": Layout("", "", 0, (64, 64)),
}


class IngestionError(IOError):
    pass


class DatasetConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    root: str
    layout: str = "synthetic"
    crop: tuple = None  # (width, height); layout default when None
    split_file: str = None

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise DatasetConfigError(f"unknown layout {self.layout!r}; expected one of {sorted(LAYOUTS)}")
        if self.crop is None:
            self.crop = LAYOUTS[self.layout].crop
        w, h = self.crop
        if w % 32 or h % 32:
            raise DatasetConfigError(f"crop {w}x{h} must have both sides divisible by 32")


@dataclass(frozen=True)
class TripletDescriptor:
    sequence: str
    index: int
    target_path: str
    source_paths: tuple
    depth_path: str
    intrinsics_path: str
    crop: tuple


@dataclass
class FrameTriplet:
    target: torch.Tensor  # (3, H, W) in [0, 1], R,G,B order
    sources: list  # [frame t-1, frame t+1]
    intrinsics: Intrinsics
    gt_depth: torch.Tensor = None  # (1, H, W) metres, 0 = no measurement
    descriptor: TripletDescriptor = field(default=None, repr=False)


def read_intrinsics(path) -> Intrinsics:
    try:
        with open(path) as f:
            vals = [float(v) for v in f.read().split()]
    except OSError as e:
        raise IngestionError(f"cannot read intrinsics file {path}: {e}") from e
    if len(vals) != 4:
        raise IngestionError(f"{path}: expected 4 numbers (fx fy cx cy), found {len(vals)}")
    return Intrinsics(*vals)


def write_intrinsics(path, K: Intrinsics):
    with open(path, "w") as f:
        f.write(" ".join(repr(float(v)) for v in K.as_tuple()) + "\n")


def read_split(path):
    entries = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise DatasetConfigError(f"{path}:{n}: expected '<sequence> <frame index>'")
            entries.append((parts[0], int(parts[1])))
    return entries


def _frame_path(root, seq, layout: Layout, sub, idx):
    return os.path.join(root, seq, sub, f"{idx:0{layout.index_width}d}.png")


def _sequence_bounds(folder):
    idx = [int(os.path.splitext(n)[0]) for n in os.listdir(folder) if n.endswith(".png")]
    return (min(idx), max(idx)) if idx else (None, None)


def load_split(spec: DatasetSpec):
    """Resolve a split file into triplet descriptors (split order, no decoding)."""
    if not os.path.isdir(spec.root):
        raise IngestionError(f"dataset root {spec.root} does not exist")
    if spec.split_file is None:
        raise DatasetConfigError("a split file is required")
    layout = LAYOUTS[spec.layout]
    default_K = os.path.join(spec.root, "intrinsics.txt")
    out = []
    for seq, idx in read_split(spec.split_file):
        seq_dir = os.path.join(spec.root, seq)
        seq_K = os.path.join(seq_dir, "intrinsics.txt")
        K_path = seq_K if os.path.exists(seq_K) else default_K
        if spec.layout == "synthetic":
            tgt = os.path.join(seq_dir, "image.png")
            srcs = (os.path.join(seq_dir, "source_0.png"), os.path.join(seq_dir, "source_1.png"))
            depth = os.path.join(seq_dir, "depth.png")
        else:
            img_dir = os.path.join(seq_dir, layout.image_dir)
            if not os.path.isdir(img_dir):
                raise IngestionError(f"missing image directory {img_dir}")
            lo, hi = _sequence_bounds(img_dir)
            if lo is None or idx <= lo or idx >= hi:
                log.info("skipping %s frame %d: no full triplet at sequence boundary", seq, idx)
                continue
            tgt = _frame_path(spec.root, seq, layout, layout.image_dir, idx)
            srcs = tuple(_frame_path(spec.root, seq, layout, layout.image_dir, idx + o) for o in (-1, 1))
            depth = _frame_path(spec.root, seq, layout, layout.depth_dir, idx)
        for p in (tgt, *srcs):
            if not os.path.exists(p):
                raise IngestionError(f"missing frame {p}")
        if not os.path.exists(K_path):
            raise IngestionError(f"missing intrinsics file {K_path}")
        out.append(TripletDescriptor(seq, idx, tgt, srcs, depth if os.path.exists(depth) else None,
                                     K_path, tuple(spec.crop)))
    return out


def load_rgb(path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1], channel order R,G,B."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "P"):
                raise IngestionError(f"{path}: colour image required, got mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except IngestionError:
        raise
    except Exception as e:
        raise IngestionError(f"cannot decode image {path}: {e}") from e
    return arr.transpose(2, 0, 1)


def bgr_to_rgb(arr: np.ndarray) -> np.ndarray:
    """Swap planes of a (3, H, W) B,G,R array into R,G,B order."""
    return arr[::-1].copy()


def load_depth_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except Exception as e:
        raise IngestionError(f"cannot decode depth map {path}: {e}") from e
    return arr / DEPTH_SCALE


def save_depth_png(path, depth):
    depth = np.asarray(depth, dtype=np.float64)
    vals = np.clip(np.round(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(vals).save(path)


def save_image_png(path, img):
    """Save a (3, H, W) [0, 1] image as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def crop_geometry(size, crop):
    """Cover-resize then centre-crop: returns ``(scale, (new_w, new_h), (dx, dy))``."""
    w, h = size
    cw, ch = crop
    s = max(cw / w, ch / h)
    nw, nh = max(cw, int(round(w * s))), max(ch, int(round(h * s)))
    return s, (nw, nh), ((nw - cw) // 2, (nh - ch) // 2)


def adjust_intrinsics(K: Intrinsics, size, crop):
    s, (nw, nh), (dx, dy) = crop_geometry(size, crop)
    sx, sy = nw / size[0], nh / size[1]
    return K.scaled(sx, sy).cropped(dx, dy)


def _crop_array(arr, size, crop, resample):
    """Apply the cover-resize + centre-crop to a (C, H, W) array."""
    s, (nw, nh), (dx, dy) = crop_geometry(size, crop)
    cw, ch = crop
    if (nw, nh) != tuple(size):
        planes = [np.asarray(Image.fromarray(p.astype(np.float32), mode="F").resize((nw, nh), resample)) for p in arr]
        arr = np.stack(planes, 0)
    return arr[:, dy:dy + ch, dx:dx + cw]


def load_triplet(desc: TripletDescriptor) -> FrameTriplet:
    frames = [load_rgb(p) for p in (desc.target_path, *desc.source_paths)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise IngestionError(f"frames of {desc.sequence}:{desc.index} differ in size: {shapes}")
    h, w = frames[0].shape[1:]
    size = (w, h)
    frames = [_crop_array(f, size, desc.crop, Image.BILINEAR) for f in frames]
    K = adjust_intrinsics(read_intrinsics(desc.intrinsics_path), size, desc.crop)
    gt = None
    if desc.depth_path is not None:
        d = load_depth_png(desc.depth_path)
        if d.shape != (h, w):
            raise IngestionError(f"{desc.depth_path}: depth shape {d.shape} does not match image {(h, w)}")
        gt = torch.from_numpy(_crop_array(d[None], size, desc.crop, Image.NEAREST).astype(np.float32))
    t = [torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32)) for f in frames]
    return FrameTriplet(t[0], t[1:], K, gt, desc)


def iter_triplets(descriptors, workers=4):
    """Decode triplets in a thread pool, yielding them in descriptor order."""
    if workers <= 1:
        yield from map(load_triplet, descriptors)
        return
    with ThreadPoolExecutor(workers) as pool:
        yield from pool.map(load_triplet, descriptors)


def export_synthetic_triplet(trip, out_dir):
    """Write a :class:`laanet.synth.SyntheticTriplet` in the synthetic layout."""
    from .synth import export_scene

    export_scene(trip.scene, out_dir)
    for i, src in enumerate(trip.sources):
        save_image_png(os.path.join(out_dir, f"source_{i}.png"), src)
    write_intrinsics(os.path.join(out_dir, "intrinsics.txt"), trip.intrinsics)
    np.save(os.path.join(out_dir, "poses.npy"), trip.poses)
