"""Datasets: the engineered robust/non-robust 2-D Gaussian task, IDX-format
image ingestion, padding/cropping augmentation, and Rademacher directions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Toy task defaults: the y coordinate separates the classes almost perfectly
# (2.5 sigma margin) yet flips under an 0.1-radius attack; the x coordinate
# is weaker per-sample but robust (margin 1.0 >> 0.1).
DEFAULT_TOY_MU = (1.0, 0.05)
DEFAULT_TOY_SIGMA = (0.5, 0.02)


class BadMagic(Exception):
    pass


class TruncatedFile(Exception):
    pass


class CountMismatch(Exception):
    pass


@dataclass
class ToySpec:
    mu: tuple = DEFAULT_TOY_MU
    sigma: tuple = DEFAULT_TOY_SIGMA   # per-axis std devs (diagonal covariance)
    n_per_class: int = 500
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma) <= 0:
            raise ValueError("sigma entries must be > 0")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")


@dataclass
class LabeledDataset:
    xs: np.ndarray                 # [N, ...], float64
    ys: np.ndarray                 # [N], int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise CountMismatch(f"{len(self.xs)} inputs vs {len(self.ys)} labels")

    def __len__(self):
        return len(self.xs)

    @property
    def input_scale(self):
        return self.meta.get("input_scale")

    def subset(self, idx):
        return LabeledDataset(self.xs[idx], self.ys[idx], dict(self.meta))


def gen_toy(spec: ToySpec):
    """Class 1 ~ N(mu, diag(sigma^2)), class 0 ~ N(-mu, diag(sigma^2))."""
    rng = np.random.default_rng(spec.seed)
    mu = np.asarray(spec.mu, dtype=np.float64)
    sigma = np.asarray(spec.sigma, dtype=np.float64)
    pos = mu + rng.standard_normal((spec.n_per_class, 2)) * sigma
    neg = -mu + rng.standard_normal((spec.n_per_class, 2)) * sigma
    xs = np.concatenate([pos, neg])
    ys = np.concatenate([np.ones(spec.n_per_class, dtype=np.int64),
                         np.zeros(spec.n_per_class, dtype=np.int64)])
    return LabeledDataset(xs, ys, {"name": "toy", "input_scale": None})


def save_toy_csv(dataset, path):
    with open(path, "w") as fh:
        fh.write("x1,x2,label\n")
        for (x1, x2), y in zip(dataset.xs, dataset.ys):
            fh.write(f"{float(x1)!r},{float(x2)!r},{int(y)}\n")


def load_toy_csv(path):
    xs, ys = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "x1,x2,label":
            raise BadMagic(f"unexpected toy CSV header {header!r}")
        for line in fh:
            a, b, y = line.strip().split(",")
            xs.append((float(a), float(b)))
            ys.append(int(y))
    return LabeledDataset(np.asarray(xs), np.asarray(ys, dtype=np.int64),
                          {"name": "toy", "input_scale": None})


def _read_idx(path, want_magic, want_rank):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 * (1 + want_rank):
        raise TruncatedFile(f"{path}: header short")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != want_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{want_magic:08x}")
    dims = struct.unpack_from(f">{want_rank}I", blob, 4)
    start = 4 * (1 + want_rank)
    count = int(np.prod(dims))
    if len(blob) - start < count:
        raise TruncatedFile(f"{path}: {len(blob) - start} data bytes, "
                            f"header implies {count}")
    if len(blob) - start > count:
        raise TruncatedFile(f"{path}: {len(blob) - start - count} trailing bytes")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=start)
    return data.reshape(dims)


def load_idx(images_path, labels_path):
    """IDX image/label pair -> dataset with pixels scaled into [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    xs = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(xs, labels.astype(np.int64),
                          {"name": "idx", "input_scale": (0.0, 1.0)})


def write_idx_images(images_u8, path):
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images_u8.tobytes())


def write_idx_labels(labels_u8, path):
    labels_u8 = np.ascontiguousarray(labels_u8, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels_u8.shape[0]))
        fh.write(labels_u8.tobytes())


def augment_pad_crop(x, pad, rng):
    """Zero-pad each spatial side by `pad`, crop back at a random offset."""
    if pad == 0:
        return x
    x = np.asarray(x)
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
    out = np.empty_like(x)
    for i in range(b):
        oy, ox = offs[i]
        out[i] = xp[i, :, oy:oy + h, ox:ox + w]
    return out


def rademacher(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


_FONT_CANDIDATES = (
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
)


def render_digit_corpus(n, seed, size=28):
    """Deterministic font-rendered digit images, an offline MNIST stand-in.

    Glyphs 0-9 are drawn with varying fonts, sizes, offsets, and rotations,
    then lightly noised. Returns (images uint8 [n,size,size], labels uint8).
    Requires Pillow; image runs against real IDX files never need it.
    """
    try:
        from PIL import Image, ImageDraw, ImageFilter, ImageFont
    except ImportError as exc:  # pragma: no cover
        raise ImportError("render_digit_corpus needs Pillow") from exc

    import os
    fonts = [p for p in _FONT_CANDIDATES if os.path.exists(p)]
    if not fonts:
        raise FileNotFoundError("no usable TTF font found for digit rendering")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    for i in range(n):
        digit = str(labels[i])
        font_path = fonts[rng.integers(0, len(fonts))]
        font = ImageFont.truetype(font_path, int(rng.integers(22, 29)))
        stroke = int(rng.integers(1, 3))
        img = Image.new("L", (size * 2, size * 2), 0)
        draw = ImageDraw.Draw(img)
        x0, y0, x1, y1 = draw.textbbox((0, 0), digit, font=font,
                                       stroke_width=stroke)
        cx = size - (x1 - x0) / 2 - x0 + rng.integers(-2, 3)
        cy = size - (y1 - y0) / 2 - y0 + rng.integers(-2, 3)
        draw.text((cx, cy), digit, fill=255, font=font, stroke_width=stroke,
                  stroke_fill=255)
        img = img.rotate(float(rng.uniform(-8, 8)), resample=Image.BILINEAR,
                         center=(size, size))
        img = img.filter(ImageFilter.GaussianBlur(radius=0.3))
        img = img.crop((size // 2, size // 2, size // 2 + size, size // 2 + size))
        # push stroke cores back to full brightness: high contrast keeps the
        # task solvable under large l-inf budgets, like thick handwriting
        arr = np.asarray(img, dtype=np.float64)
        arr = 255.0 * np.clip(arr / 140.0, 0.0, 1.0)
        arr += rng.normal(0.0, 2.0, size=arr.shape)
        images[i] = np.clip(arr, 0, 255).astype(np.uint8)
    return images, labels
