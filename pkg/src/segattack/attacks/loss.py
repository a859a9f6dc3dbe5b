from __future__ import annotations

import numpy as np
import torch

PROB_FLOOR = 1e-12
MODES = ("targeted", "untargeted")
REDUCTIONS = ("mean", "sum")


def _t(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    p = torch.gather(probs, -1, labels.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(torch.clamp(p, min=PROB_FLOOR))


def attack_loss_terms(probs, y_pred, target, fooling, mode: str,
                      confidence_threshold: float = 0.3,
                      reduction: str = "mean") -> tuple[torch.Tensor, torch.Tensor]:
    """Return the (fooling, preservation) terms of the indirect attack objective.

    Each term is the per-pixel cross-entropy summed over its region and, with
    ``reduction="mean"``, divided by the region's pixel count; an empty
    preservation region contributes 0.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if (mode == "targeted") != (target is not None):
        raise ValueError("a target map is required for targeted attacks and only for them")
    probs = _t(probs)
    y_pred = _t(y_pred).long()
    f = _t(fooling).bool()
    n_fool = int(f.sum())
    if n_fool == 0:
        raise ValueError("fooling mask is empty: nothing to fool")
    keep = ~f
    n_keep = int(keep.sum())

    if mode == "untargeted":
        fool_px = -_ce(probs, y_pred)
    else:
        tgt = _t(target).long()
        tgt = torch.where(f, tgt, torch.zeros_like(tgt))
        fool_px = _ce(probs, tgt)
        p_t = torch.gather(probs, -1, tgt.unsqueeze(-1)).squeeze(-1)
        done = (probs.argmax(-1) == tgt) & (p_t >= confidence_threshold)
        fool_px = torch.where(done, torch.zeros_like(fool_px), fool_px)
    mean = reduction == "mean"
    fool = torch.where(f, fool_px, torch.zeros_like(fool_px)).sum()
    if mean:
        fool = fool / n_fool
    if n_keep:
        keep_px = _ce(probs, y_pred)
        preserve = torch.where(keep, keep_px, torch.zeros_like(keep_px)).sum()
        if mean:
            preserve = preserve / n_keep
    else:
        preserve = fool.new_zeros(())
    return fool, preserve


def attack_loss(probs, y_pred, target, fooling, mode: str,
                confidence_threshold: float = 0.3, reduction: str = "mean") -> torch.Tensor:
    fool, preserve = attack_loss_terms(probs, y_pred, target, fooling, mode,
                                       confidence_threshold, reduction)
    return fool + preserve
