"""Synthetic shape-classification dataset and image file formats.

Images are generated as 8-bit RGB so that an in-memory split and the same split
read back from disk are bit-identical.  The on-disk layout is::

    <root>/index.csv          # '# key=value' header lines, then split,path,label rows
    <root>/<split>/<nnnnn>.png

The index header stores the generator spec, the per-channel normalisation
statistics of the training split and a content digest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from tame.errors import FormatError

SHAPES = ("disk", "square", "triangle")
SPLITS = ("train", "val", "test")
INDEX_NAME = "index.csv"
INDEX_MAGIC = "tame-dataset v1"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Generator settings; ``train``/``val``/``test`` are total images per split."""

    num_classes: int = 3
    image_size: int = 64
    train: int = 600
    val: int = 200
    test: int = 200
    seed: int = 0
    radius_range: tuple = (9.0, 16.0)
    background_range: tuple = (0.0, 0.45)
    foreground_range: tuple = (0.55, 1.0)
    noise_std: float = 0.04

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be between 2 and {len(SHAPES)}")
        if self.image_size < 2 * self.radius_range[1] + 2:
            raise ValueError("image_size too small for the largest shape")
        for name in ("radius_range", "background_range", "foreground_range"):
            object.__setattr__(self, name, tuple(float(r) for r in getattr(self, name)))
        if self.background_range[1] >= self.foreground_range[0]:
            raise ValueError("background_range must lie below foreground_range")

    def split_size(self, split: str) -> int:
        return {"train": self.train, "val": self.val, "test": self.test}[split]

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("radius_range", "background_range", "foreground_range"):
            d[name] = list(d[name])
        return d


@dataclass
class ImageSet:
    """A split held in memory: raw images ``N x 3 x H x W`` in [0, 1] plus labels."""

    images: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    paths: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def normalized(self, dtype=np.float32) -> np.ndarray:
        return ((self.images - self.mean[None, :, None, None]) / self.std[None, :, None, None]).astype(dtype)

    def fill_value(self, mode: str) -> Optional[np.ndarray]:
        """Normalised per-channel colour that masking blends towards: ``"black"`` or ``"mean"`` (None)."""
        return mask_fill(mode, self.mean, self.std)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return ImageSet(self.images[idx], self.labels[idx], self.mean, self.std, paths)


MASK_FILLS = ("black", "mean")


def mask_fill(mode: str, mean, std) -> Optional[np.ndarray]:
    if mode == "mean":
        return None
    if mode == "black":
        return (-np.asarray(mean, np.float64) / np.asarray(std, np.float64)).astype(np.float32)
    raise ValueError(f"mask fill must be one of {MASK_FILLS}, got {mode!r}")


# ------------------------------------------------------------------ drawing
def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "square":
        half = r / np.sqrt(2.0)
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            # inward normals of a triangle inscribed in a circle of radius r
            theta = angle + np.pi / 2 + 2 * np.pi * k / 3
            inside &= dx * np.cos(theta) + dy * np.sin(theta) <= r / 2
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def _random_colours(rng: np.random.Generator, spec: SyntheticDatasetSpec):
    # foreground is always brighter than background in every channel
    bg = rng.uniform(*spec.background_range, 3)
    fg = rng.uniform(*spec.foreground_range, 3)
    return fg, bg


def render_sample(rng: np.random.Generator, label: int, spec: SyntheticDatasetSpec) -> np.ndarray:
    """One ``H x W x 3`` uint8 image of shape ``SHAPES[label]``."""
    size = spec.image_size
    r = rng.uniform(*spec.radius_range)
    cy, cx = rng.uniform(r + 1, size - r - 1, 2)
    angle = rng.uniform(0, 2 * np.pi)
    fg, bg = _random_colours(rng, spec)
    mask = _shape_mask(SHAPES[label], size, cy, cx, r, angle)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0.0, spec.noise_std, (size, size, 3))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def _split_rng(spec: SyntheticDatasetSpec, split: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, SPLITS.index(split)])


def generate_split(spec: SyntheticDatasetSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Uint8 images ``N x H x W x 3`` and labels for one split; labels cycle through classes."""
    rng = _split_rng(spec, split)
    n = spec.split_size(split)
    labels = np.arange(n) % spec.num_classes
    labels = labels[rng.permutation(n)]
    images = np.stack([render_sample(rng, int(lab), spec) for lab in labels]) if n else np.zeros(
        (0, spec.image_size, spec.image_size, 3), np.uint8)
    return images, labels.astype(np.int64)


def channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images_u8.astype(np.float64) / 255.0
    return x.mean(axis=(0, 1, 2)), x.std(axis=(0, 1, 2))


def to_chw(images_u8: np.ndarray) -> np.ndarray:
    return (images_u8.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def generate_in_memory(spec: SyntheticDatasetSpec) -> dict[str, ImageSet]:
    """All three splits without touching disk; statistics come from the train split."""
    raw = {split: generate_split(spec, split) for split in SPLITS}
    mean, std = channel_stats(raw["train"][0])
    return {s: ImageSet(to_chw(im), lab, mean.astype(np.float32), std.astype(np.float32)) for s, (im, lab) in raw.items()}


# -------------------------------------------------------------- file I/O
def png_bytes(image_u8: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image_u8).save(buf, format="PNG")
    return buf.getvalue()


def read_image(path) -> np.ndarray:
    """RGB uint8 ``H x W x 3`` from PNG or PPM."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def write_dataset(spec: SyntheticDatasetSpec, root) -> Path:
    root = Path(root)
    rows = []
    stats = None
    digest = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode())
    for split in SPLITS:
        images, labels = generate_split(spec, split)
        if split == "train":
            stats = channel_stats(images)
        (root / split).mkdir(parents=True, exist_ok=True)
        for i, (img, lab) in enumerate(zip(images, labels)):
            rel = f"{split}/{i:05d}.png"
            data = png_bytes(img)
            try:
                (root / rel).write_bytes(data)
            except OSError as exc:
                raise OSError(f"cannot write {root / rel}: {exc}") from exc
            digest.update(rel.encode())
            digest.update(data)
            rows.append((split, rel, int(lab)))
    mean, std = stats
    header = {
        "format": INDEX_MAGIC,
        "spec": json.dumps(spec.to_dict(), sort_keys=True),
        "mean": ",".join(repr(float(v)) for v in mean),
        "std": ",".join(repr(float(v)) for v in std),
        "digest": digest.hexdigest(),
    }
    with open(root / INDEX_NAME, "w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "path", "label"])
        writer.writerows(rows)
    return root / INDEX_NAME


def read_index(root) -> tuple[dict, list[tuple[str, str, int]]]:
    path = Path(root) / INDEX_NAME
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read dataset index {path}: {exc}") from exc
    header = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            header[key] = value
        else:
            body.append(line)
    if header.get("format") != INDEX_MAGIC:
        raise FormatError(f"{path} is not a dataset index")
    reader = csv.DictReader(body)
    rows = [(r["split"], r["path"], int(r["label"])) for r in reader]
    return header, rows


def load_dataset(root, splits: Sequence[str] = SPLITS) -> tuple[dict[str, ImageSet], dict]:
    """Read splits from disk.  Returns ``(sets, header)``."""
    root = Path(root)
    header, rows = read_index(root)
    mean = np.array([float(v) for v in header["mean"].split(",")], dtype=np.float32)
    std = np.array([float(v) for v in header["std"].split(",")], dtype=np.float32)
    out = {}
    for split in splits:
        mine = [r for r in rows if r[0] == split]
        images = np.stack([read_image(root / p) for _, p, _ in mine]) if mine else np.zeros((0, 1, 1, 3), np.uint8)
        labels = np.array([lab for _, _, lab in mine], dtype=np.int64)
        out[split] = ImageSet(to_chw(images), labels, mean, std, [p for _, p, _ in mine])
    return out, header


# ------------------------------------------------------------------- PGM
def write_pgm16(path, values: np.ndarray, comments: Sequence[str] = ()) -> bytes:
    """Write values in [0, 1] as a 16-bit binary PGM (big-endian, scaled by 65535)."""
    data = pgm16_bytes(values, comments)
    Path(path).write_bytes(data)
    return data


def pgm16_bytes(values: np.ndarray, comments: Sequence[str] = ()) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    if values.size and (values.min() < 0 or values.max() > 1):
        raise ValueError("PGM export needs values in [0, 1]")
    h, w = values.shape
    raw = np.round(values * 65535.0).astype(">u2")
    head = "P5\n" + "".join(f"# {c}\n" for c in comments) + f"{w} {h}\n65535\n"
    return head.encode("ascii") + raw.tobytes()


def read_pgm16(path) -> tuple[np.ndarray, list[str]]:
    """Inverse of :func:`write_pgm16`: values in [0, 1] and header comments."""
    data = Path(path).read_bytes()
    pos = 0
    tokens: list[str] = []
    comments: list[str] = []
    while len(tokens) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            tokens.extend(line.split())
    if tokens[0] != "P5" or tokens[3] != "65535":
        raise FormatError(f"{path}: not a 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return raw.astype(np.float64) / 65535.0, comments
