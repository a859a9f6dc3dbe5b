"""Mahalanobis-distance attack detection from intermediate features.

Every tapped layer gets class-conditional Gaussian profiles with one shared
covariance. A feature vector's confidence at a layer is the largest negative
squared Mahalanobis distance to any observed class mean (<= 0, and 0 exactly
at a mean). Per-pixel confidences of all layers are resized to the image and
combined by a logistic regression that localizes fooled pixels; their spatial
sums feed a second logistic regression that flags attacked images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as tF
from scipy.linalg import cholesky, solve_triangular
from scipy.special import expit
from scipy.stats import rankdata

from segattack import io
from segattack.models import FeatureStack, Model, extract_features, predict_labels

LABEL_SOURCES = ("ground_truth", "predicted")


class DetectorError(ValueError):
    pass


@dataclass
class LayerProfile:
    name: str
    means: np.ndarray  # C x K_l, rows of unobserved classes are zero
    observed: np.ndarray  # C bool
    cov: np.ndarray  # K_l x K_l, shrinkage included
    eps_reg: float = 0.0
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if not self.observed.any():
            raise DetectorError(f"layer {self.name}: no observed class")
        self.chol = cholesky(self.cov, lower=True)

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Confidence for each row of ``x`` (N x K_l)."""
        x = np.asarray(x, dtype=np.float64)
        best = None
        for c in np.flatnonzero(self.observed):
            z = solve_triangular(self.chol, (x - self.means[c]).T, lower=True)
            d = np.einsum("ij,ij->j", z, z)
            best = d if best is None else np.minimum(best, d)
        return -best


@dataclass
class GaussianProfile:
    layers: list[LayerProfile]
    num_classes: int
    labels_source: str = "ground_truth"

    @property
    def names(self) -> list[str]:
        return [lp.name for lp in self.layers]

    def layer(self, name: str) -> LayerProfile:
        for lp in self.layers:
            if lp.name == name:
                return lp
        raise KeyError(name)


def _labels_at(labels: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if labels.shape == shape:
        return labels
    rows = (np.arange(shape[0]) * labels.shape[0]) // shape[0]
    cols = (np.arange(shape[1]) * labels.shape[1]) // shape[1]
    return labels[np.ix_(rows, cols)]


def class_averages(features: FeatureStack, labels: np.ndarray,
                   num_classes: int) -> dict[str, dict[int, np.ndarray]]:
    """Per layer, the mean feature vector over each class's pixels in one image."""
    out = {}
    for name, f in features:
        lab = _labels_at(np.asarray(labels), f.shape[:2])
        flat = f.reshape(-1, f.shape[-1]).astype(np.float64)
        lab = lab.reshape(-1)
        out[name] = {int(c): flat[lab == c].mean(0) for c in np.unique(lab) if c < num_classes}
    return out


def profile_from_averages(per_image: Sequence[dict[str, dict[int, np.ndarray]]], names: list[str],
                          num_classes: int, eps_reg: float = 1e-3,
                          labels_source: str = "ground_truth") -> GaussianProfile:
    """Class means and pooled, shrunk covariance from per-image class averages."""
    layers = []
    for name in names:
        by_class: dict[int, list[np.ndarray]] = {}
        for avg in per_image:
            for c, v in avg[name].items():
                by_class.setdefault(c, []).append(v)
        dim = len(next(iter(by_class.values()))[0])
        means = np.zeros((num_classes, dim))
        observed = np.zeros(num_classes, dtype=bool)
        scatter = np.zeros((dim, dim))
        n = 0
        for c in sorted(by_class):
            a = np.stack(by_class[c])
            means[c] = a.mean(0)
            observed[c] = True
            r = a - means[c]
            scatter += r.T @ r
            n += len(a)
        cov = scatter / n
        tr = float(np.trace(cov))
        shrink = eps_reg * (tr / dim if tr > 0 else 1.0)
        cov = cov + shrink * np.eye(dim)
        layers.append(LayerProfile(name, means, observed, cov, eps_reg))
    return GaussianProfile(layers, num_classes, labels_source)


def fit_profile(model: Model, samples: Sequence, labels_source: str = "ground_truth",
                eps_reg: float = 1e-3) -> GaussianProfile:
    """``samples`` holds objects with ``image`` and ``labels`` (labels unused when predicted)."""
    if labels_source not in LABEL_SOURCES:
        raise ValueError(f"labels_source must be one of {LABEL_SOURCES}")
    if len(samples) < 2:
        raise ValueError("need at least 2 images to fit a profile")
    K = model.spec.num_classes
    per_image = []
    for s in samples:
        lab = s.labels if labels_source == "ground_truth" else predict_labels(model, s.image)
        per_image.append(class_averages(extract_features(model, s.image), lab, K))
    return profile_from_averages(per_image, model.tap_names, K, eps_reg, labels_source)


def pixel_scores(features: FeatureStack, profile: GaussianProfile) -> list[np.ndarray]:
    if features.names != profile.names:
        raise DetectorError(f"layer mismatch: features {features.names} vs profile {profile.names}")
    out = []
    for (name, f), lp in zip(features, profile.layers):
        out.append(lp.scores(f.reshape(-1, f.shape[-1])).reshape(f.shape[:2]))
    return out


def resize_scores(maps: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (corner-aligned) of each map to ``shape``; returns H x W x L."""
    layers = []
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        if m.shape == tuple(shape):
            layers.append(m)
            continue
        t = torch.as_tensor(m)[None, None]
        layers.append(tF.interpolate(t, size=tuple(shape), mode="bilinear",
                                     align_corners=True)[0, 0].numpy())
    return np.stack(layers, -1)


def image_scores(maps: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([np.asarray(m, dtype=np.float64).sum() for m in maps])


@dataclass
class LogisticDetector:
    """Logistic regression on standardized per-layer scores."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    layer_names: list[str]
    trained: bool = True
    heldout_auroc: float | None = None

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return ((x - self.mean) / self.scale) @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return expit(self.decision(x))


class PixelDetector(LogisticDetector):
    pass


class ImageDetector(LogisticDetector):
    pass


def _logistic_fit(x: np.ndarray, y: np.ndarray, iters: int, ridge: float):
    """Full-batch Newton iterations on the class-balanced, lightly ridged logistic loss.

    Per-layer scores are strongly collinear, which leaves plain gradient
    descent far from the optimum after any practical number of steps. Rows
    are put in a canonical order first, so the result does not depend on the
    order the samples were given in.
    """
    order = np.lexsort(np.column_stack([x, y]).T[::-1])
    x, y = x[order], y[order]
    mean = x.mean(0)
    scale = x.std(0)
    scale[scale == 0] = 1.0
    z = np.column_stack([(x - mean) / scale, np.ones(len(x))])
    pos = y == 1
    sw = np.where(pos, 0.5 / pos.sum(), 0.5 / (~pos).sum())
    reg = np.full(z.shape[1], ridge)
    reg[-1] = 0.0  # bias is not penalized
    theta = np.zeros(z.shape[1])
    for _ in range(iters):
        p = expit(z @ theta)
        g = z.T @ (sw * (p - y)) + reg * theta
        h = (z * (sw * p * (1 - p))[:, None]).T @ z + np.diag(reg + 1e-12)
        step = np.linalg.solve(h, g)
        theta = theta - step
        if not np.all(np.isfinite(theta)):
            raise DetectorError("logistic fit diverged")
    return theta[:-1], float(theta[-1]), mean, scale


def split_images(n: int, train_fraction: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Image-level split: a seeded permutation, first ``round(f * n)`` indices train."""
    if n < 2:
        raise ValueError("need at least 2 images to split")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(n - 1, max(1, round(train_fraction * n)))
    return np.sort(perm[:k]), np.sort(perm[k:])


def fit_logistic(x: np.ndarray, y: np.ndarray, layer_names: list[str], iters: int = 30,
                 ridge: float = 1e-4, cls=LogisticDetector) -> LogisticDetector:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.float64).reshape(-1)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be N x L with one label per row")
    if np.unique(y).size < 2:
        raise DetectorError("training labels contain a single class")
    w, b, mean, scale = _logistic_fit(x, y, iters, ridge)
    return cls(weights=w, bias=float(b), mean=mean, scale=scale, layer_names=list(layer_names))


def fit_pixel_detector(stacks: Sequence[np.ndarray], fooled: Sequence[np.ndarray],
                       layer_names: list[str], train_fraction: float = 0.8, seed: int = 0,
                       iters: int = 30, ridge: float = 1e-4) -> PixelDetector:
    """Fit on the training images of an 80/20 image-level split; AUROC on the rest."""
    if len(stacks) != len(fooled):
        raise ValueError("one fooled mask per score stack required")
    train, held = split_images(len(stacks), train_fraction, seed)

    def rows(idx):
        x = np.concatenate([stacks[i].reshape(-1, stacks[i].shape[-1]) for i in idx])
        y = np.concatenate([np.asarray(fooled[i]).reshape(-1) != 0 for i in idx])
        return x, y

    x, y = rows(train)
    det = fit_logistic(x, y, layer_names, iters, ridge, PixelDetector)
    xh, yh = rows(held)
    det.heldout_auroc = auroc(det.decision(xh), yh) if np.unique(yh).size == 2 else None
    return det


def fit_image_detector(vectors: Sequence[np.ndarray], attacked: Sequence[bool],
                       layer_names: list[str], train_fraction: float = 0.8, seed: int = 0,
                       iters: int = 30, ridge: float = 1e-4) -> ImageDetector:
    x = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    y = np.asarray(attacked, dtype=bool)
    train, held = split_images(len(x), train_fraction, seed)
    det = fit_logistic(x[train], y[train], layer_names, iters, ridge, ImageDetector)
    det.heldout_auroc = auroc(det.decision(x[held]), y[held]) if np.unique(y[held]).size == 2 else None
    return det


@dataclass
class DetectionResult:
    pixel_scores: np.ndarray  # H x W probabilities that the pixel was fooled
    image_score: float
    pixel_mask: np.ndarray
    image_flag: bool
    threshold: float = 0.5


def score_image(model: Model, image: np.ndarray, profile: GaussianProfile):
    """Per-layer confidence maps, the resized H x W x L stack and the image-level vector."""
    maps = pixel_scores(extract_features(model, image), profile)
    return maps, resize_scores(maps, np.shape(image)[:2]), image_scores(maps)


def detect(image: np.ndarray, model: Model, profile: GaussianProfile,
           pixel_detector: PixelDetector, image_detector: ImageDetector,
           threshold: float = 0.5) -> DetectionResult:
    names = model.tap_names
    for part, got in (("profile", profile.names), ("pixel detector", pixel_detector.layer_names),
                      ("image detector", image_detector.layer_names)):
        if list(got) != names:
            raise DetectorError(f"{part} layers {list(got)} do not match the model's {names}")
    _, stack, vec = score_image(model, image, profile)
    px = pixel_detector.predict_proba(stack.reshape(-1, stack.shape[-1])).reshape(stack.shape[:2])
    im = float(image_detector.predict_proba(vec[None])[0])
    return DetectionResult(pixel_scores=px, image_score=im, pixel_mask=px >= threshold,
                           image_flag=im >= threshold, threshold=threshold)


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def save_detection(directory: str | Path, profile: GaussianProfile,
                   pixel_detector: PixelDetector | None = None,
                   image_detector: ImageDetector | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for lp in profile.layers:
        arrays[f"profile/{lp.name}/means"] = lp.means
        arrays[f"profile/{lp.name}/observed"] = lp.observed
        arrays[f"profile/{lp.name}/cov"] = lp.cov
    dets = {}
    for key, det in (("pixel", pixel_detector), ("image", image_detector)):
        if det is None:
            continue
        for part in ("weights", "mean", "scale"):
            arrays[f"{key}/{part}"] = getattr(det, part)
        dets[key] = {"bias": det.bias, "layer_names": det.layer_names,
                     "heldout_auroc": det.heldout_auroc}
    np.savez(d / "tensors.npz", **arrays)
    io.write_json(d / "manifest.json", {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "segattack.detection",
        "num_classes": profile.num_classes,
        "labels_source": profile.labels_source,
        "layers": [{"name": lp.name, "eps_reg": lp.eps_reg} for lp in profile.layers],
        "detectors": dets,
        "tensors": sorted(arrays),
        "tensors_sha256": io.sha256_file(d / "tensors.npz"),
    })
    return d


def load_detection(directory: str | Path):
    """Returns (profile, pixel_detector or None, image_detector or None)."""
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise FileNotFoundError(f"missing manifest: {d / 'manifest.json'}")
    man = io.read_json(d / "manifest.json")
    if man.get("kind") != "segattack.detection":
        raise ValueError(f"{d} is not a detection checkpoint")
    if io.sha256_file(d / "tensors.npz") != man["tensors_sha256"]:
        raise io.ChecksumError(f"checksum mismatch for {d / 'tensors.npz'}")
    with np.load(d / "tensors.npz") as z:
        arr = {k: z[k] for k in z.files}
    layers = [LayerProfile(l["name"], arr[f"profile/{l['name']}/means"],
                           arr[f"profile/{l['name']}/observed"], arr[f"profile/{l['name']}/cov"],
                           l["eps_reg"]) for l in man["layers"]]
    profile = GaussianProfile(layers, man["num_classes"], man["labels_source"])
    out = [profile]
    for key, cls in (("pixel", PixelDetector), ("image", ImageDetector)):
        meta = man["detectors"].get(key)
        out.append(None if meta is None else cls(
            weights=arr[f"{key}/weights"], bias=meta["bias"], mean=arr[f"{key}/mean"],
            scale=arr[f"{key}/scale"], layer_names=meta["layer_names"],
            heldout_auroc=meta["heldout_auroc"]))
    return tuple(out)
