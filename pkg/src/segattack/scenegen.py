"""Synthetic street-scene analog with pixel-exact label maps.

Every scene is a horizontal banding of static classes (listed top to bottom)
with filled rectangles/ellipses of dynamic classes painted on top.

Randomness comes from NumPy's ``Philox4x64-10`` counter-based bit generator.
Sample ``i`` of a config with seed ``s`` uses the 128-bit key
``s + 2**64 * i`` with the counter starting at zero, so a sample depends on
nothing but ``(s, i)`` and can be generated in any order or in parallel.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from segattack import io

MAX_RETRIES = 100

# base RGB colors for the default class names; other names get a hue-wheel color
_PALETTE = {
    "sky": (0.42, 0.55, 0.70),
    "wall": (0.55, 0.44, 0.36),
    "ground": (0.40, 0.40, 0.43),
    "vegetation": (0.25, 0.55, 0.25),
    "vehicle": (0.80, 0.18, 0.20),
    "person": (0.92, 0.78, 0.30),
}


class SceneConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    static_classes: tuple[str, ...] = ("sky", "wall", "ground")
    dynamic_classes: tuple[str, ...] = ("vehicle", "person")
    objects_per_image: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (10, 24)  # side length range in pixels
    shapes: tuple[str, ...] = ("rect", "ellipse")
    min_dynamic_fraction: float = 0.04
    max_dynamic_fraction: float = 0.35
    texture_noise_std: float = 0.04
    illumination_jitter: float = 0.3  # per-image brightness gain in [1 - j, 1 + j]
    # "shaded": object pixels = shading factor x color of the static surface behind them;
    # "solid": object pixels take the dynamic class's own palette color
    object_style: str = "shaded"
    dynamic_shading: tuple[float, ...] = (0.6, 0.8)
    seed: int = 0

    def __post_init__(self) -> None:
        # tolerate lists coming from JSON
        for name in ("static_classes", "dynamic_classes", "objects_per_image", "object_size", "shapes",
                     "dynamic_shading"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def classes(self) -> tuple[str, ...]:
        return self.static_classes + self.dynamic_classes

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def static_ids(self) -> tuple[int, ...]:
        return tuple(range(len(self.static_classes)))

    @property
    def dynamic_ids(self) -> tuple[int, ...]:
        n = len(self.static_classes)
        return tuple(range(n, n + len(self.dynamic_classes)))

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise SceneConfigError("image size must be positive")
        if not self.static_classes:
            raise SceneConfigError("at least one static class is required")
        if set(self.static_classes) & set(self.dynamic_classes):
            raise SceneConfigError("static and dynamic class lists must be disjoint")
        if len(set(self.classes)) != len(self.classes):
            raise SceneConfigError("duplicate class names")
        if self.num_classes > 255:
            raise SceneConfigError("at most 255 classes fit an 8-bit label file")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise SceneConfigError(f"bad objects_per_image range {self.objects_per_image}")
        if hi > 0 and not self.dynamic_classes:
            raise SceneConfigError("objects requested but no dynamic classes")
        smin, smax = self.object_size
        if smin < 1 or smax < smin or smax > min(self.width, self.height):
            raise SceneConfigError(f"bad object_size range {self.object_size}")
        if not set(self.shapes) <= {"rect", "ellipse"} or not self.shapes:
            raise SceneConfigError(f"unknown shapes {self.shapes}")
        if not 0.0 <= self.min_dynamic_fraction <= self.max_dynamic_fraction < 1.0:
            raise SceneConfigError("need 0 <= min_dynamic_fraction <= max_dynamic_fraction < 1")
        if not 0.0 <= self.texture_noise_std <= 1.0:
            raise SceneConfigError("texture_noise_std must lie in [0, 1]")
        if not 0.0 <= self.illumination_jitter < 1.0:
            raise SceneConfigError("illumination_jitter must lie in [0, 1)")
        if self.object_style not in ("shaded", "solid"):
            raise SceneConfigError(f"unknown object_style {self.object_style!r}")
        if self.object_style == "shaded" and (
                len(self.dynamic_shading) != len(self.dynamic_classes)
                or min(self.dynamic_shading, default=1.0) <= 0):
            raise SceneConfigError("need one positive shading factor per dynamic class")
        if not 0 <= self.seed < 2**64:
            raise SceneConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1], on the 8-bit grid
    labels: np.ndarray  # H x W uint8

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.labels, other.labels))


@dataclass
class Dataset:
    samples: list[Sample]
    splits: dict[str, list[int]]
    config: SceneConfig
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, split: str) -> list[Sample]:
        return [self.samples[i] for i in self.splits[split]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.config == other.config and self.splits == other.splits
                and self.samples == other.samples)


def class_color(config: SceneConfig, class_id: int) -> np.ndarray:
    name = config.classes[class_id]
    if name in _PALETTE:
        return np.array(_PALETTE[name], dtype=np.float64)
    # golden-angle hue wheel, fixed saturation/value
    h = (class_id * 0.618033988749895) % 1.0
    i = int(h * 6)
    f = h * 6 - i
    v, s = 0.8, 0.6
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array(rgb, dtype=np.float64)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    if index < 0:
        raise ValueError("sample index must be non-negative")
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(index) << 64)))


def _band_labels(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = config.height, config.width
    n = len(config.static_classes)
    h_min = max(1, H // (3 * n))
    if h_min * n > H:
        h_min = H // n
    extra = H - n * h_min
    cuts = np.sort(rng.integers(0, extra + 1, size=n - 1))
    heights = np.diff(np.concatenate([[0], cuts, [extra]])) + h_min
    # a band may be empty only when the image is shorter than the class count
    rows = np.repeat(np.arange(n, dtype=np.uint8), heights)
    if rows.size < H:  # only when H < n
        rows = np.concatenate([rows, np.full(H - rows.size, n - 1, np.uint8)])
    return np.repeat(rows[:H, None], W, axis=1)


def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    r = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    c = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return r[:, None] ** 2 + c[None, :] ** 2 <= 1.0


def _paint_objects(config: SceneConfig, labels: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    H, W = labels.shape
    lo, hi = config.objects_per_image
    smin, smax = config.object_size
    count = int(rng.integers(lo, hi + 1))
    out = labels.copy()
    for _ in range(count):
        cls = config.dynamic_ids[int(rng.integers(len(config.dynamic_ids)))]
        shape = config.shapes[int(rng.integers(len(config.shapes)))]
        h = int(rng.integers(smin, smax + 1))
        w = int(rng.integers(smin, smax + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        m = _shape_mask(shape, h, w)
        out[top:top + h, left:left + w][m] = cls
    return out


def generate_scene(config: SceneConfig, index: int) -> Sample:
    """Deterministically generate sample ``index`` of ``config``.

    Raises SceneConfigError when no layout with a dynamic-pixel fraction inside
    ``[min_dynamic_fraction, max_dynamic_fraction]`` is found within
    ``MAX_RETRIES`` retries.
    """
    rng = scene_rng(config.seed, index)
    H, W = config.height, config.width
    background = _band_labels(config, rng)
    dyn = np.array(config.dynamic_ids, dtype=np.uint8)
    for _attempt in range(MAX_RETRIES + 1):
        labels = _paint_objects(config, background, rng)
        frac = np.isin(labels, dyn).sum() / (H * W)
        if config.min_dynamic_fraction <= frac <= config.max_dynamic_fraction:
            break
    else:
        raise SceneConfigError(
            f"sample {index}: dynamic fraction bounds [{config.min_dynamic_fraction}, "
            f"{config.max_dynamic_fraction}] not met after {MAX_RETRIES} retries")

    gain = 1.0 + config.illumination_jitter * (2.0 * rng.random() - 1.0)
    image = render_colors(config, labels, background) * gain
    if config.texture_noise_std > 0:
        s = config.texture_noise_std
        image = image + np.clip(rng.standard_normal((H, W, 3)) * s, -2 * s, 2 * s)
    image = io.from_uint8(io.to_uint8(np.clip(image, 0.0, 1.0)))
    return Sample(image=image, labels=labels)


def render_colors(config: SceneConfig, labels: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Noise-free, unit-illumination colors of a label map over its static background."""
    palette = np.stack([class_color(config, k) for k in range(config.num_classes)])
    if config.object_style == "solid":
        return palette[labels]
    factor = np.ones(config.num_classes)
    for cls, f in zip(config.dynamic_ids, config.dynamic_shading):
        factor[cls] = f
    return palette[background] * factor[labels][..., None]


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to the given fractions."""
    f = np.asarray(fractions, dtype=np.float64)
    if np.any(f < 0) or not math.isclose(f.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    raw = f * n
    sizes = np.floor(raw + 1e-9).astype(int)
    rem = n - sizes.sum()
    order = sorted(range(len(f)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes.tolist()


def generate_dataset(config: SceneConfig, n: int,
                     split_fractions: Sequence[float] = (0.8, 0.1, 0.1),
                     split_names: Sequence[str] = ("train", "val", "test")) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(split_names) != len(split_fractions):
        raise ValueError("one name per split fraction")
    sizes = split_sizes(n, split_fractions)
    splits, start = {}, 0
    for name, size in zip(split_names, sizes):
        splits[name] = list(range(start, start + size))
        start += size
    samples = [generate_scene(config, i) for i in range(n)]
    return Dataset(samples=samples, splits=splits, config=config)


def _filenames(i: int) -> tuple[str, str]:
    return f"img_{i:06d}.png", f"lbl_{i:06d}.png"


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(dataset.samples):
        img_name, lbl_name = _filenames(i)
        io.save_rgb(d / img_name, s.image)
        io.save_gray8(d / lbl_name, s.labels)
        files.append({"image": img_name, "labels": lbl_name,
                      "image_sha256": io.sha256_file(d / img_name),
                      "labels_sha256": io.sha256_file(d / lbl_name)})
    manifest = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "segattack.dataset",
        "checksum_algorithm": "sha256",
        "config": dataset.config.to_dict(),
        "n": len(dataset.samples),
        "splits": dataset.splits,
        "files": files,
    }
    io.write_json(d / "manifest.json", manifest)
    return d / "manifest.json"


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    manifest = io.read_json(path)
    if manifest.get("schema_version") != io.SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {manifest.get('schema_version')!r}")
    config = SceneConfig.from_dict(manifest["config"])
    K = config.num_classes
    samples = []
    for entry in manifest["files"]:
        for key in ("image", "labels"):
            f = d / entry[key]
            if not f.is_file():
                raise DatasetError(f"missing file {f}")
            if io.sha256_file(f) != entry[f"{key}_sha256"]:
                raise io.ChecksumError(f"checksum mismatch for {f}")
        labels = io.load_gray8(d / entry["labels"])
        if labels.max(initial=0) >= K:
            raise DatasetError(f"{entry['labels']}: label value {labels.max()} >= K={K}")
        samples.append(Sample(image=io.load_rgb(d / entry["image"]), labels=labels))
    if len(samples) != manifest["n"]:
        raise DatasetError("manifest n does not match file list")
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    return Dataset(samples=samples, splits=splits, config=config)


def dynamic_fraction(labels: np.ndarray, config: SceneConfig) -> float:
    return float(np.isin(labels, config.dynamic_ids).sum() / labels.size)
