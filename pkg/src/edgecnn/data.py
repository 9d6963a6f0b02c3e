"""Class-folder datasets, multi-size variants and a synthetic gesture generator."""
from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError

log = logging.getLogger(__name__)

STANDARD_SIZES = (64, 96, 128, 256)
GESTURE_NAMES = ("one", "two", "three", "four", "five")
IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # (n,) int64
    class_names: list

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ConfigError(f"images must be (n, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigError("label index outside the class list")

    def __len__(self):
        return len(self.labels)

    @property
    def items(self):
        return list(zip(self.images, self.labels.tolist()))

    @property
    def image_size(self):
        return self.images.shape[1]

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names))

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.class_names))


# -- image codec --------------------------------------------------------------

_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def encode_image(image) -> bytes:
    """Binary PPM (P6), 8-bit RGB."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError(f"expected an (H, W, 3) uint8 image, got {a.shape} {a.dtype}")
    h, w, _ = a.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes()


def decode_image(buf: bytes) -> np.ndarray:
    if buf[:2] == b"P6":
        match = _PPM_HEADER.match(buf)
        if not match:
            raise FormatError("malformed PPM header", 0)
        w, h, maxval = (int(g) for g in match.groups())
        if maxval != 255 or w < 1 or h < 1:
            raise FormatError(f"unsupported PPM geometry {w}x{h} maxval {maxval}", 0)
        start = match.end()
        need = w * h * 3
        if len(buf) - start < need:
            raise FormatError(f"PPM payload truncated: {len(buf) - start} of {need} bytes", len(buf))
        return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(h, w, 3).copy()
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError:  # pragma: no cover
        raise FormatError("not a PPM file and Pillow is unavailable", 0) from None
    try:
        with Image.open(io.BytesIO(buf)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"undecodable image: {exc}", 0) from None


def read_image(path):
    return decode_image(Path(path).read_bytes())


def write_image(path, image):
    Path(path).write_bytes(encode_image(image))


# -- resizing ------------------------------------------------------------------

def _axis_weights(src, dst):
    # pixel-centre sampling (align_corners=False), edge-clamped
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize(image, target):
    """Bilinear resize of an (H, W, C) image to target x target."""
    a = np.asarray(image)
    if isinstance(target, int):
        target = (target, target)
    th, tw = target
    h, w = a.shape[:2]
    if (h, w) == (th, tw):
        return a.copy()
    y0, y1, fy = _axis_weights(h, th)
    x0, x1, fx = _axis_weights(w, tw)
    f = a.astype(np.float64)
    top = f[y0][:, x0] * (1 - fx)[None, :, None] + f[y0][:, x1] * fx[None, :, None]
    bot = f[y1][:, x0] * (1 - fx)[None, :, None] + f[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    if a.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(a.dtype)


# -- folders -------------------------------------------------------------------

def scan_class_folders(root, size=None) -> LabeledDataset:
    """Load ``root/<class>/<image>``; classes and files in lexicographic order.

    Undecodable files are skipped with a warning. With ``size`` every image
    is resized on load; otherwise all images must already share one extent.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ConfigError(f"{root} contains no class folders")
    images, labels = [], []
    for label, name in enumerate(classes):
        n_before = len(images)
        for path in sorted((root / name).iterdir()):
            if not path.is_file():
                continue
            try:
                img = read_image(path)
            except FormatError as exc:
                log.warning("skipping %s: %s", path, exc)
                continue
            if size is not None:
                img = resize(img, size)
            images.append(img)
            labels.append(label)
        if len(images) == n_before:
            raise ConfigError(f"class folder {root / name} has no decodable images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigError(f"images under {root} have mixed extents {sorted(shapes)}; pass size=")
    return LabeledDataset(np.stack(images), np.array(labels), classes)


def write_class_folders(dataset: LabeledDataset, root):
    root = Path(root)
    counters = {}
    for img, label in zip(dataset.images, dataset.labels):
        name = dataset.class_names[label]
        k = counters.get(name, 0)
        counters[name] = k + 1
        folder = root / name
        folder.mkdir(parents=True, exist_ok=True)
        write_image(folder / f"{name}_{k:05d}.ppm", img)


def build_size_variants(source_root, output_root, sizes=STANDARD_SIZES):
    """Mirror ``source_root`` into ``output_root/folder_<size>/<class>/`` per size."""
    source_root, output_root = Path(source_root), Path(output_root)
    if not source_root.is_dir():
        raise FileNotFoundError(f"source folder {source_root} does not exist")
    classes = sorted(p for p in source_root.iterdir() if p.is_dir())
    if not classes:
        raise ConfigError(f"{source_root} contains no class folders")
    written = {}
    for cls in classes:
        files = [p for p in sorted(cls.iterdir()) if p.is_file()]
        decoded = []
        for path in files:
            try:
                decoded.append((path, read_image(path)))
            except FormatError as exc:
                log.warning("skipping %s: %s", path, exc)
        if not decoded:
            raise ConfigError(f"class folder {cls} has no decodable images")
        for size in sizes:
            dest = output_root / f"folder_{size}" / cls.name
            try:
                dest.mkdir(parents=True, exist_ok=True)
                for path, img in decoded:
                    write_image(dest / (path.stem + ".ppm"), resize(img, size))
            except OSError as exc:
                raise OSError(f"failed writing {dest}: {exc}") from exc
            written[size] = output_root / f"folder_{size}"
    return written


# -- synthetic gestures ----------------------------------------------------------

@dataclass
class Nuisance:
    """Ranges of the random nuisance factors; all zero gives exact per-class duplicates."""

    brightness: float = 0.25     # +/- multiplicative
    rotation: float = 15.0       # +/- degrees
    translation: float = 0.08    # +/- fraction of the half-width
    scale: float = 0.08          # +/- relative hand size
    background: float = 1.0      # texture amplitude multiplier
    noise: float = 6.0           # additive gaussian sigma in grey levels

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _smooth_field(rng, size, cells=4):
    coarse = rng.random((cells, cells, 3))
    return resize(coarse, size)


def render_gesture(fingers, size, rng, nuisance: Nuisance):
    """Draw a palm with ``fingers`` raised digits as an (size, size, 3) uint8 image."""
    n = nuisance
    theta = np.deg2rad(rng.uniform(-n.rotation, n.rotation)) if n.rotation else 0.0
    tx, ty = (rng.uniform(-n.translation, n.translation, 2) if n.translation else (0.0, 0.0))
    sc = 1.0 + (rng.uniform(-n.scale, n.scale) if n.scale else 0.0)
    bright = 1.0 + (rng.uniform(-n.brightness, n.brightness) if n.brightness else 0.0)

    c = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    # inverse transform into glyph coordinates
    u = ((xx - tx) * np.cos(theta) + (yy - ty) * np.sin(theta)) / sc
    w = (-(xx - tx) * np.sin(theta) + (yy - ty) * np.cos(theta)) / sc

    edge = 2.0 / size / sc
    palm = np.sqrt((u / 0.42) ** 2 + ((w - 0.38) / 0.3) ** 2) - 1.0
    mask = np.clip(0.5 - palm * 0.3 / edge, 0, 1)
    xs = np.linspace(-0.32, 0.32, 5)
    for k in _finger_slots(fingers):
        # capsule from the palm top upwards
        top, bottom = -0.62, 0.2
        ww = np.clip(w, top, bottom)
        d = np.sqrt((u - xs[k]) ** 2 + (w - ww) ** 2) - 0.065
        mask = np.maximum(mask, np.clip(0.5 - d / edge, 0, 1))

    bg_level = np.array([0.35, 0.4, 0.45])
    bg = np.broadcast_to(bg_level, (size, size, 3)).copy()
    if n.background:
        bg += n.background * 0.3 * (_smooth_field(rng, size) - 0.5)
    skin = np.array([0.85, 0.65, 0.5])
    if n.background:
        skin = skin + rng.uniform(-0.08, 0.08, 3)
    img = (bg * (1 - mask[..., None]) + skin * mask[..., None]) * bright * 255.0
    if n.noise:
        img += rng.normal(0, n.noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _finger_slots(fingers):
    # symmetric arrangements keep the class invariant under horizontal flips
    return {1: [2], 2: [1, 3], 3: [0, 2, 4], 4: [0, 1, 3, 4], 5: [0, 1, 2, 3, 4]}[fingers]


def synthesize(classes=5, per_class=100, size=96, seed=0, nuisance: Nuisance = None) -> LabeledDataset:
    """Seeded stand-in for the gesture photos: ``per_class`` images of 1..5 raised fingers."""
    if per_class < 2:
        raise ConfigError("per_class must be >= 2")
    if not 2 <= classes <= 5:
        raise ConfigError("the glyph set supports 2 to 5 classes")
    nuisance = Nuisance() if nuisance is None else nuisance
    rng = np.random.default_rng(seed)
    images = np.empty((classes * per_class, size, size, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    for i, label in enumerate(labels):
        images[i] = render_gesture(label + 1, size, rng, nuisance)
    return LabeledDataset(images, labels, list(GESTURE_NAMES[:classes]))
