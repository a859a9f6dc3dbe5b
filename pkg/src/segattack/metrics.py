"""Evaluation quantities for attacks on segmentation predictions.

All rates compare against the *clean prediction*, never the ground truth.
"""

from __future__ import annotations

import csv
import math
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class EmptyRegionError(ValueError):
    pass


@dataclass
class RegionMetrics:
    miou_u: float
    asr_u: float
    preserved_rate: float | None
    perceptibility_linf: float
    perceptibility_l2: float
    sparsity: float | None
    asr_t: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _region(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) != 0
    if not m.any():
        raise EmptyRegionError("region is empty")
    return m


def miou(pred_a: np.ndarray, pred_b: np.ndarray, region: np.ndarray, K: int) -> float:
    """Mean IoU of two label maps restricted to ``region``.

    Classes absent from both maps inside the region are skipped.
    """
    m = _region(region)
    a = np.asarray(pred_a)[m].astype(np.int64)
    b = np.asarray(pred_b)[m].astype(np.int64)
    conf = np.bincount(a * K + b, minlength=K * K).reshape(K, K)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float(np.mean(inter[present] / union[present]))


def asr_targeted(pred_adv: np.ndarray, target: np.ndarray, fooling: np.ndarray) -> float:
    f = _region(fooling)
    return float(np.count_nonzero(np.asarray(pred_adv)[f] == np.asarray(target)[f]) / f.sum())


def asr_untargeted(pred_adv: np.ndarray, pred_clean: np.ndarray, fooling: np.ndarray) -> float:
    f = _region(fooling)
    return float(np.count_nonzero(np.asarray(pred_adv)[f] != np.asarray(pred_clean)[f]) / f.sum())


def preserved_rate(pred_adv: np.ndarray, pred_clean: np.ndarray, fooling: np.ndarray) -> float:
    keep = _region(np.asarray(fooling) == 0)
    return float(np.count_nonzero(np.asarray(pred_adv)[keep] == np.asarray(pred_clean)[keep])
                 / keep.sum())


def perceptibility(delta: np.ndarray) -> tuple[float, float]:
    """(max |entry|, 2-norm); the sum of squares is correctly rounded, so independent of order."""
    d = np.asarray(delta, dtype=np.float64)
    if d.size == 0:
        return 0.0, 0.0
    return float(np.abs(d).max()), math.sqrt(math.fsum(np.square(d).ravel()))


def perturbed_pixels(delta: np.ndarray) -> np.ndarray:
    d = np.asarray(delta)
    return np.any(d != 0, axis=-1) if d.ndim == 3 else d != 0


def sparsity(delta: np.ndarray, parent_mask: np.ndarray) -> float:
    """Fraction of the parent mask left unperturbed (1 = nothing perturbed)."""
    p = _region(parent_mask)
    touched = np.count_nonzero(perturbed_pixels(delta) & p)
    return float(1.0 - touched / p.sum())


def region_metrics(pred_adv: np.ndarray, pred_clean: np.ndarray, fooling: np.ndarray,
                   delta: np.ndarray, K: int, target: np.ndarray | None = None,
                   parent_mask: np.ndarray | None = None) -> RegionMetrics:
    linf, l2 = perceptibility(delta)
    keep = np.asarray(fooling) == 0
    return RegionMetrics(
        miou_u=miou(pred_adv, pred_clean, fooling, K),
        asr_u=asr_untargeted(pred_adv, pred_clean, fooling),
        asr_t=None if target is None else asr_targeted(pred_adv, target, fooling),
        preserved_rate=preserved_rate(pred_adv, pred_clean, fooling) if keep.any() else None,
        perceptibility_linf=linf,
        perceptibility_l2=l2,
        sparsity=(sparsity(delta, parent_mask)
                  if parent_mask is not None and np.any(parent_mask) else None),
    )


def aggregate(records: Sequence[dict], keys: Iterable[str] | None = None) -> dict:
    """Unweighted mean over images of every numeric field (None entries skipped)."""
    if not records:
        return {"n_images": 0}
    if keys is None:
        keys = []
        for r in records:
            for k, v in r.items():
                if k not in keys and isinstance(v, (int, float)) and not isinstance(v, bool):
                    keys.append(k)
    out: dict = {"n_images": len(records)}
    for k in keys:
        vals = [r[k] for r in records if r.get(k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
