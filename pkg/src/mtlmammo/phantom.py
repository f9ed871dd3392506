"""Synthetic mammography phantoms and their on-disk PGM dataset layout.

Every sample is a pure function of ``(config.seed, index)``. Class ids:
0 healthy, 1 benign mass, 2 malignant mass, 3 benign calcification,
4 malignant calcification. The image-level cancer label is 1 exactly when the
mask holds a class 2 or class 4 pixel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import rng_for

NUM_CLASSES = 5
MALIGNANT = (2, 4)
CLASS_NAMES = ("healthy", "benign_mass", "malignant_mass", "benign_calc", "malignant_calc")
INDEX_HEADER = ["image", "mask", "label", "split"]


class DatasetError(ValueError):
    """A dataset file failed validation; the message names the file."""


@dataclass(frozen=True)
class PhantomConfig:
    image_h: int = 64
    image_w: int = 64
    lesion_rate: float = 1.2
    # probabilities of lesion classes 1..4
    class_ratios: tuple = (0.3, 0.2, 0.3, 0.2)
    noise_sigma: float = 0.03
    seed: int = 0
    mass_radius: tuple = (3.5, 7.0)
    mass_contrast: float = 0.2
    malignant_mass_contrast: float = 0.35
    benign_axis_ratio: tuple = (0.75, 1.0)
    malignant_axis_ratio: tuple = (0.35, 0.55)
    calc_contrast: float = 0.25
    malignant_calc_contrast: float = 0.55
    benign_calc_count: tuple = (3, 5)
    malignant_calc_count: tuple = (7, 11)

    def __post_init__(self):
        if self.image_h <= 0 or self.image_w <= 0:
            raise ValueError("image dimensions must be positive")
        if self.lesion_rate < 0:
            raise ValueError("lesion_rate must be non-negative")
        r = np.asarray(self.class_ratios, dtype=float)
        if r.shape != (4,) or np.any(r < 0) or not math.isclose(r.sum(), 1.0, abs_tol=1e-9):
            raise ValueError(f"class_ratios must be 4 probabilities summing to 1, got {self.class_ratios}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def p_malignant(self) -> float:
        return float(self.class_ratios[1] + self.class_ratios[3])

    def expected_prevalence(self) -> float:
        """Poisson thinning: P(at least one malignant lesion)."""
        return 1.0 - math.exp(-self.lesion_rate * self.p_malignant)

    def check_divisible(self, stride: int) -> None:
        if self.image_h % stride or self.image_w % stride:
            raise ValueError(f"image size {self.image_h}x{self.image_w} is not divisible by stride {stride}")


@dataclass
class Sample:
    image: np.ndarray  # float32 [1, H, W] in [0, 1]
    mask: np.ndarray  # uint8 [H, W]
    label: int
    index: int = -1


def label_from_mask(mask: np.ndarray) -> int:
    return int(np.isin(mask, MALIGNANT).any())


def _breast(rng, h, w, yy, xx):
    """Normalized radius of a half-ellipse attached to the left or right edge."""
    left = rng.random() < 0.5
    cx = 0.0 if left else w - 1.0
    cy = h / 2 + rng.uniform(-0.05, 0.05) * h
    ax = rng.uniform(0.75, 0.95) * w
    ay = rng.uniform(0.42, 0.5) * h
    return np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2), (cx, cy, ax, ay)


def _place(rng, geom):
    cx, cy, ax, ay = geom
    r = 0.7 * math.sqrt(rng.random())
    t = rng.uniform(-math.pi / 2, math.pi / 2)
    dx = r * math.cos(t) * ax
    x = cx + dx if cx == 0.0 else cx - dx
    return cy + r * math.sin(t) * ay, x


def generate_sample(config: PhantomConfig, index: int) -> Sample:
    h, w = config.image_h, config.image_w
    rng = rng_for(config.seed, "data", index)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    rb, geom = _breast(rng, h, w, yy, xx)
    tissue = 1.0 / (1.0 + np.exp(-(1.0 - rb) / 0.05))
    background = 0.35 + 0.12 * np.clip(1.0 - rb, 0, 1)
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        background += 0.04 * np.cos(2 * math.pi * (fy * yy / h + fx * xx / w) + phase)
    image = background * tissue
    mask = np.zeros((h, w), dtype=np.uint8)

    n_lesions = int(rng.poisson(config.lesion_rate))
    classes = rng.choice([1, 2, 3, 4], size=n_lesions, p=config.class_ratios)
    lesions = []
    for cls in classes:
        cy, cx = _place(rng, geom)
        lesions.append((int(cls), cy, cx, rng.integers(0, 2**32)))
    # malignant supports are drawn last so they are never overwritten
    priority = {1: 0, 3: 1, 2: 2, 4: 3}
    for cls, cy, cx, sub_seed in sorted(lesions, key=lambda l: priority[l[0]]):
        lrng = np.random.default_rng(sub_seed)
        if cls in (1, 2):
            _draw_mass(config, lrng, cls, cy, cx, yy, xx, image, mask)
        else:
            _draw_calcs(config, lrng, cls, cy, cx, image, mask)

    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=(h, w)) * tissue
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return Sample(image, mask, label_from_mask(mask), index)


def _draw_mass(config, rng, cls, cy, cx, yy, xx, image, mask):
    radius = rng.uniform(*config.mass_radius)
    if cls == 2:
        ratio = rng.uniform(*config.malignant_axis_ratio)
        contrast = config.malignant_mass_contrast
    else:
        ratio = rng.uniform(*config.benign_axis_ratio)
        contrast = config.mass_contrast
    theta = rng.uniform(0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    rho = np.sqrt((u / radius) ** 2 + (v / (radius * ratio)) ** 2)
    image += contrast / (1.0 + np.exp((rho - 1.0) * 6.0))
    support = rho <= 1.0
    support[int(round(cy)), int(round(cx))] = True
    mask[support] = cls


# speckle footprints, 2-3 px across
_SPECKLES = (
    np.array([[0, 0], [0, 1], [1, 0], [1, 1]]),
    np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]]),
    np.array([[dy, dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]),
)


def _draw_calcs(config, rng, cls, cy, cx, image, mask):
    h, w = mask.shape
    lo, hi = config.malignant_calc_count if cls == 4 else config.benign_calc_count
    contrast = config.malignant_calc_contrast if cls == 4 else config.calc_contrast
    spread = rng.uniform(2.5, 5.0)
    n = int(rng.integers(lo, hi + 1))
    for i in range(n):
        if i == 0:
            py, px = int(round(cy)), int(round(cx))
        else:
            py = int(round(cy + rng.normal(0, spread)))
            px = int(round(cx + rng.normal(0, spread)))
        shape = _SPECKLES[int(rng.integers(0, len(_SPECKLES)))]
        ys = np.clip(py + shape[:, 0], 0, h - 1)
        xs = np.clip(px + shape[:, 1], 0, w - 1)
        image[ys, xs] += contrast
        mask[ys, xs] = cls


# ---- PGM ---------------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"PGM writer needs a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5, maxval <= 255)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: non-numeric PGM header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise DatasetError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos:]
    if len(raster) != w * h:
        raise DatasetError(f"{path}: expected {w * h} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


# ---- dataset directories -------------------------------------------------------

@dataclass
class Dataset:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return {"train": self.train, "test": self.test}[name]


def write_dataset(config: PhantomConfig, n_train: int, n_test: int, out_dir) -> list[dict]:
    """Write images, masks and ``index.csv``; return the index rows."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for idx in range(n_train + n_test):
        s = generate_sample(config, idx)
        img_rel, mask_rel = f"images/{idx:05d}.pgm", f"masks/{idx:05d}.pgm"
        write_pgm(out / img_rel, quantize(s.image[0]))
        write_pgm(out / mask_rel, s.mask)
        rows.append({"image": img_rel, "mask": mask_rel, "label": s.label,
                     "split": "train" if idx < n_train else "test"})
    with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=INDEX_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    index = root / "index.csv"
    if not index.is_file():
        raise DatasetError(f"{index}: missing dataset index")
    ds = Dataset()
    with open(index, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_HEADER:
            raise DatasetError(f"{index}: header {reader.fieldnames} != {INDEX_HEADER}")
        for i, row in enumerate(reader):
            ds.split(_check_split(row["split"], index)).append(_load_row(root, row, i))
    return ds


def _check_split(split, index):
    if split not in ("train", "test"):
        raise DatasetError(f"{index}: unknown split {split!r}")
    return split


def _load_row(root: Path, row: dict, i: int) -> Sample:
    img_path, mask_path = root / row["image"], root / row["mask"]
    image = read_pgm(img_path)
    mask = read_pgm(mask_path)
    if image.shape != mask.shape:
        raise DatasetError(f"{mask_path}: mask shape {mask.shape} != image shape {image.shape}")
    if mask.max(initial=0) >= NUM_CLASSES:
        raise DatasetError(f"{mask_path}: mask pixel value {int(mask.max())} > {NUM_CLASSES - 1}")
    if row["label"] not in ("0", "1"):
        raise DatasetError(f"{root / 'index.csv'}: row {i + 1} label {row['label']!r} is not 0/1")
    label = int(row["label"])
    if label != label_from_mask(mask):
        raise DatasetError(f"{mask_path}: label {label} in index.csv disagrees with mask "
                           f"(malignant pixels present: {bool(label_from_mask(mask))})")
    index = int(Path(row["image"]).stem) if Path(row["image"]).stem.isdigit() else i
    return Sample((image.astype(np.float32) / 255.0)[None], mask, label, index)


def summarize(samples: Iterable[Sample], k: int = NUM_CLASSES) -> dict:
    """Prevalence and per-class pixel frequencies."""
    counts = np.zeros(k, dtype=np.int64)
    n = pos = 0
    for s in samples:
        counts += np.bincount(s.mask.ravel(), minlength=k)[:k]
        pos += s.label
        n += 1
    total = max(int(counts.sum()), 1)
    return {"n": n, "prevalence": pos / n if n else 0.0,
            "pixel_freq": (counts / total).tolist(), "pixel_counts": counts.tolist()}
