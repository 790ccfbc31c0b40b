"""Dataset ingestion, splits, balanced batching, augmentation, synthesis.

Datasets are directory trees with one subdirectory per class
(``root/<class_name>/*.{jpg,png,ppm}``). Class ids follow the lexicographic
order of the directory names so labels are stable across scans. Images are
decoded to float32 RGB in [0,1]. PPM (binary P6) is read and written
natively; JPEG/PNG decoding uses Pillow when it is installed.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ArgumentError, DatasetError, FormatError
from .tensor import make_rng

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".ppm")
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    """Write a float [0,1] (h,w,3) image as binary P6."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ArgumentError(f"write_ppm expects (h,w,3), got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(blob: bytes, count: int):
    """First `count` whitespace-delimited header tokens, skipping # comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(blob):
            raise FormatError("truncated ppm header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise FormatError("truncated ppm header")
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P6":
        raise FormatError(f"{path}: not a binary P6 ppm")
    try:
        (_, w, h, maxval), offset = _ppm_tokens(blob, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"{path}: bad ppm header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    raster = blob[offset:offset + need]
    if len(raster) != need:
        raise FormatError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0


def load_image(path) -> np.ndarray:
    """Decode to float32 (h,w,3) in [0,1]; grayscale is replicated to RGB."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise FormatError(
            f"{path}: no decoder for {ext or 'extensionless'} files (Pillow not installed)"
        ) from exc
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise FormatError(f"{path}: undecodable image: {exc}") from exc
    return arr.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    class_id: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    root: str
    class_names: list
    entries: list
    skipped: int = 0

    def class_count(self) -> int:
        return len(self.class_names)

    def select(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def counts(self) -> dict:
        table = {
            name: {s: 0 for s in SPLITS + ("unassigned", "total")}
            for name in self.class_names
        }
        for e in self.entries:
            row = table[self.class_names[e.class_id]]
            row[e.split] += 1
            row["total"] += 1
        return table


def scan_dataset(root) -> DatasetManifest:
    root = str(root)
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise DatasetError(f"dataset root {root!r} contains no class directories")
    entries = []
    skipped = 0
    for cid, name in enumerate(class_names):
        cdir = os.path.join(root, name)
        files = sorted(os.listdir(cdir))
        kept = 0
        for fname in files:
            fpath = os.path.join(cdir, fname)
            if os.path.isfile(fpath) and os.path.splitext(fname)[1].lower() in IMAGE_EXTENSIONS:
                entries.append(ManifestEntry(fpath, cid))
                kept += 1
            else:
                skipped += 1
        if kept == 0:
            raise DatasetError(f"class directory {name!r} has no images")
    return DatasetManifest(root=root, class_names=class_names, entries=entries, skipped=skipped)


def split_dataset(m: DatasetManifest, ratios=(0.6, 0.2, 0.2), rng=None) -> DatasetManifest:
    """Stratified split; val/test take floor(n*ratio), the remainder trains."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    if rng is None:
        rng = make_rng(0)
    entries = [replace(e) for e in m.entries]
    for cid, name in enumerate(m.class_names):
        idxs = [i for i, e in enumerate(entries) if e.class_id == cid]
        n = len(idxs)
        if n < 3:
            raise DatasetError(f"class {name!r} has only {n} images; need at least 3 to split")
        order = rng.permutation(n)
        n_val = int(np.floor(n * ratios[1]))
        n_test = int(np.floor(n * ratios[2]))
        n_train = n - n_val - n_test
        for rank, pos in enumerate(order):
            if rank < n_train:
                split = "train"
            elif rank < n_train + n_val:
                split = "val"
            else:
                split = "test"
            entries[idxs[pos]].split = split
    return DatasetManifest(root=m.root, class_names=m.class_names, entries=entries, skipped=m.skipped)


def export_manifest(m: DatasetManifest) -> str:
    lines = ["path\tclass\tsplit"]
    for e in m.entries:
        lines.append(f"{e.path}\t{m.class_names[e.class_id]}\t{e.split}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# resize and augmentation
# ---------------------------------------------------------------------------

def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img at fractional (ys, xs) grids with edge clamping."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)[..., None]
    fx = (xs - x0).astype(img.dtype)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping.

    Centers align so constant images stay constant, same-size resize is the
    identity, and the four corner pixels are reproduced exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output extents must be >= 1, got {out_h}x{out_w}")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    out = _sample_bilinear(img, ys[:, None].repeat(out_w, 1), xs[None, :].repeat(out_h, 0))
    return out[:, :, 0] if squeeze else out


@dataclass
class AugmentConfig:
    """Per-transform application probabilities and magnitude ranges."""

    rotation: float = 0.3
    translation: float = 0.3
    mirror: float = 0.3
    zoom: float = 0.3
    brightness: float = 0.3
    color_shift: float = 0.3
    blur: float = 0.3
    sharpen: float = 0.3
    shadow: float = 0.3
    rotation_deg: float = 25.0
    translation_frac: float = 0.1
    zoom_range: tuple = (0.8, 1.2)
    brightness_delta: float = 0.2
    color_shift_delta: float = 0.1
    sharpen_amount: float = 0.5
    shadow_factor: float = 0.6

    TRANSFORMS = (
        "rotation", "translation", "mirror", "zoom", "brightness",
        "color_shift", "blur", "sharpen", "shadow",
    )

    def probabilities(self) -> list:
        return [getattr(self, t) for t in self.TRANSFORMS]

    def validate(self) -> None:
        probs = self.probabilities()
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ArgumentError(f"transform probabilities must lie in [0,1], got {probs}")
        if any(p == 1.0 for p in probs):
            raise ArgumentError("a probability of 1 leaves no chance of an untransformed image")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(**{t: 0.0 for t in cls.TRANSFORMS})


def _center_grid(h, w):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return ys, xs, (h - 1) / 2.0, (w - 1) / 2.0


def _rotate(img, degrees):
    h, w = img.shape[:2]
    ys, xs, cy, cx = _center_grid(h, w)
    # destination -> source mapping uses the inverse rotation
    t = np.deg2rad(degrees)
    dy, dx = ys - cy, xs - cx
    src_y = cy + np.cos(t) * dy - np.sin(t) * dx
    src_x = cx + np.sin(t) * dy + np.cos(t) * dx
    return _sample_bilinear(img, src_y, src_x)


def _translate(img, dy, dx):
    h, w = img.shape[:2]
    ys, xs, _, _ = _center_grid(h, w)
    return _sample_bilinear(img, ys - dy, xs - dx)


def _zoom(img, factor):
    h, w = img.shape[:2]
    ys, xs, cy, cx = _center_grid(h, w)
    return _sample_bilinear(img, cy + (ys - cy) / factor, cx + (xs - cx) / factor)


def _box_blur3(img):
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            acc += padded[i:i + img.shape[0], j:j + img.shape[1]]
    return (acc / 9.0).astype(img.dtype)


def _shadow(img, angle, py, px, factor):
    h, w = img.shape[:2]
    ys, xs, _, _ = _center_grid(h, w)
    side = (ys - py) * np.cos(angle) + (xs - px) * np.sin(angle) > 0
    out = img.copy()
    out[side] *= factor
    return out


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Apply each transform independently with its probability, then clamp."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ArgumentError(f"augment_image expects (h,w,3), got {img.shape}")
    cfg.validate()
    out = img.astype(np.float32, copy=True)
    h, w = out.shape[:2]
    for name in cfg.TRANSFORMS:
        if rng.random() >= getattr(cfg, name):
            continue
        if name == "rotation":
            out = _rotate(out, rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        elif name == "translation":
            out = _translate(
                out,
                rng.uniform(-cfg.translation_frac, cfg.translation_frac) * h,
                rng.uniform(-cfg.translation_frac, cfg.translation_frac) * w,
            )
        elif name == "mirror":
            out = out[:, ::-1, :]
        elif name == "zoom":
            out = _zoom(out, rng.uniform(*cfg.zoom_range))
        elif name == "brightness":
            out = out + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
        elif name == "color_shift":
            out = out + rng.uniform(-cfg.color_shift_delta, cfg.color_shift_delta, size=3)
        elif name == "blur":
            out = _box_blur3(out)
        elif name == "sharpen":
            out = out + cfg.sharpen_amount * (out - _box_blur3(out))
        elif name == "shadow":
            out = _shadow(
                out, rng.uniform(0, 2 * np.pi),
                rng.uniform(0, h - 1), rng.uniform(0, w - 1), cfg.shadow_factor,
            )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# balanced batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray      # (batch, h, w, 3) float32 in [0,1]
    labels: np.ndarray      # (batch, classes) one-hot float32
    class_ids: np.ndarray   # (batch,) int64


def one_hot(class_ids, class_count: int) -> np.ndarray:
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= class_count):
        raise ArgumentError(f"class id out of range for {class_count} classes")
    out = np.zeros((ids.shape[0], class_count), dtype=np.float32)
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


class _ClassQueue:
    """Shuffled draw-without-replacement queue that reshuffles on exhaustion.

    Small classes recycle often (oversampling); large classes are only
    partially consumed per epoch (undersampling), each image at most once
    per pass.
    """

    def __init__(self, paths, rng):
        self.paths = list(paths)
        self.rng = rng
        self.order = []

    def draw(self, n):
        picked = []
        while len(picked) < n:
            if not self.order:
                self.order = [self.paths[i] for i in self.rng.permutation(len(self.paths))]
            picked.append(self.order.pop())
        return picked


def _decode(path, cache, lock, loader):
    if cache is None:
        return loader(path)
    with lock:
        hit = cache.get(path)
    if hit is not None:
        return hit
    img = loader(path)
    with lock:
        cache[path] = img
    return img


def _build_batch(items, seed, cfg, target_hw, class_count, cache, lock, loader):
    rng = make_rng(seed)
    th, tw = target_hw
    images = np.empty((len(items), th, tw, 3), dtype=np.float32)
    ids = np.empty(len(items), dtype=np.int64)
    for i, (path, cid) in enumerate(items):
        img = _decode(path, cache, lock, loader)
        if cfg is not None:
            img = augment_image(img, cfg, rng)
        if img.shape[:2] != (th, tw):
            img = resize_bilinear(img, th, tw).astype(np.float32)
        images[i] = img
        ids[i] = cid
    return Batch(images=images, labels=one_hot(ids, class_count), class_ids=ids)


def balanced_batch_iter(
    m: DatasetManifest,
    batch_size: int,
    target_hw,
    rng,
    augment: Optional[AugmentConfig] = None,
    split: str = "train",
    prefetch: int = 0,
    cache_decoded: bool = True,
    loader=load_image,
):
    """Endless stream of class-balanced batches.

    Every batch takes floor(batch/K) images per class; the batch mod K
    leftover slots go to the first classes of a per-batch rotated class
    order, so the surplus circulates. Per-class counts therefore differ by
    at most 1 within a batch and even out across batches.
    """
    k = m.class_count()
    if batch_size < k:
        raise ArgumentError(f"batch size {batch_size} is smaller than the class count {k}")
    if augment is not None:
        augment.validate()
    per_class = [[e.path for e in m.entries if e.split == split and e.class_id == c] for c in range(k)]
    for c, paths in enumerate(per_class):
        if not paths:
            raise DatasetError(f"class {m.class_names[c]!r} has no images in split {split!r}")
    queues = [_ClassQueue(paths, rng) for paths in per_class]
    base, extra = divmod(batch_size, k)
    cache = {} if cache_decoded else None
    lock = threading.Lock()

    def plan(batch_index):
        order = [(batch_index + i) % k for i in range(k)]
        items = []
        for slot, c in enumerate(order):
            want = base + (1 if slot < extra else 0)
            items.extend((p, c) for p in queues[c].draw(want))
        seed = int(rng.integers(0, 2 ** 63 - 1))
        return items, seed

    def build(args):
        items, seed = args
        return _build_batch(items, seed, augment, tuple(target_hw), k, cache, lock, loader)

    if prefetch <= 0:
        t = 0
        while True:
            yield build(plan(t))
            t += 1
    else:
        workers = max(1, min(prefetch, int(os.environ.get("ERNET_THREADS", "1"))))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = []
            t = 0
            while True:
                while len(pending) < prefetch + 1:
                    pending.append(pool.submit(build, plan(t)))
                    t += 1
                yield pending.pop(0).result()


def eval_batches(
    m: DatasetManifest, split: str, target_hw, batch_size: int = 64, loader=load_image
):
    """Sequential unaugmented batches of a split, for evaluation passes."""
    entries = m.select(split)
    if not entries:
        raise DatasetError(f"split {split!r} is empty")
    th, tw = target_hw
    k = m.class_count()
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        images = np.empty((len(chunk), th, tw, 3), dtype=np.float32)
        ids = np.empty(len(chunk), dtype=np.int64)
        for i, e in enumerate(chunk):
            img = loader(e.path)
            if img.shape[:2] != (th, tw):
                img = resize_bilinear(img, th, tw).astype(np.float32)
            images[i] = img
            ids[i] = e.class_id
        yield Batch(images=images, labels=one_hot(ids, k), class_ids=ids)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB on arrays in [0,1]."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _synth_image(class_id: int, class_count: int, hw, rng) -> np.ndarray:
    """One sample: class-specific hue and grating plus random clutter."""
    h, w = hw
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij"
    )
    hue = (class_id + 0.3 * rng.uniform(-0.5, 0.5)) / class_count
    theta = np.pi * class_id / class_count + rng.uniform(-0.15, 0.15)
    freq = 2.0 + class_id
    phase = rng.uniform(0, 2 * np.pi)
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (ys * np.cos(theta) + xs * np.sin(theta)) + phase)
    ramp = xs if rng.random() < 0.5 else ys
    value = 0.35 + 0.35 * grating + 0.2 * ramp
    sat = np.full_like(value, rng.uniform(0.55, 0.85))
    img = _hsv_to_rgb(np.full_like(value, hue), sat, value)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, 2)
        radius = rng.uniform(0.05, 0.18)
        blob = np.clip(1.0 - np.hypot(ys - cy, xs - cx) / radius, 0.0, 1.0)[..., None]
        color = rng.uniform(0, 1, 3)
        img = img * (1 - 0.35 * blob) + 0.35 * blob * color
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(root, classes: int, per_class: int, rng, hw=(64, 64)) -> list:
    """Write a learnable synthetic class tree of P6 images; returns class names."""
    if classes < 2:
        raise ArgumentError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ArgumentError(f"per_class must be >= 1, got {per_class}")
    names = [f"class_{k:02d}" for k in range(classes)]
    for k, name in enumerate(names):
        cdir = os.path.join(str(root), name)
        os.makedirs(cdir, exist_ok=True)
        for i in range(per_class):
            write_ppm(os.path.join(cdir, f"img_{i:04d}.ppm"), _synth_image(k, classes, hw, rng))
    return names
