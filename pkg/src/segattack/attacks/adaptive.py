"""Two-stage group-sparse attack that finds where in M to put the perturbation.

Stage 1 minimizes ``lam2 * sum_t ||M_t * delta||_2 + lam1 * ||delta||_2^2 + J``
over the whole perturbation mask, so whole patches are driven to zero and the
surviving ones mark the regions the model is most sensitive to. The
highest-norm patches are kept up to the requested sparsity and stage 2
re-optimizes the same objective with ``lam2 = 0`` on their union only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from segattack.attacks.loss import attack_loss
from segattack.attacks.pgd import AttackError, AttackResult, finalize_result, prepare
from segattack.masks import PatchGrid, TargetMap, patch_partition


@dataclass(frozen=True)
class AdaptiveConfig:
    lambda1: float = 0.01
    lambda2_stage1: float = 100.0
    patch_h: int = 8
    patch_w: int = 16
    sparsity: float = 0.9  # fraction of the parent mask to leave untouched
    optimizer_lr: float = 0.01
    iters_stage1: int = 100
    iters_stage2: int = 100
    clip_threshold: float = 0.005
    confidence_threshold: float = 0.3
    warm_start: bool = True
    clamp_to_valid_range: bool = True
    # The lambda defaults are sized against the plain per-pixel sum of J;
    # "mean" divides each region's sum by its pixel count as in pgd_attack.
    loss_reduction: str = "sum"

    def __post_init__(self) -> None:
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError("sparsity must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2_stage1 < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch size must be >= 1")
        if self.optimizer_lr <= 0 or self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise ValueError("optimizer_lr > 0 and non-negative iteration counts required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _patch_sq_norms(delta: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    per_pixel = (delta * delta).sum(-1).reshape(-1)
    return masks.reshape(masks.shape[0], -1) @ per_pixel


def group_sparsity_penalty(delta, grid: PatchGrid):
    """Sum over patches of the 2-norm of the perturbation restricted to the patch.

    Accepts a numpy array (returns float) or a tensor (returns a differentiable
    tensor whose subgradient at an all-zero patch is 0).
    """
    as_numpy = not isinstance(delta, torch.Tensor)
    d = torch.as_tensor(np.asarray(delta, dtype=np.float64)) if as_numpy else delta
    if d.dim() == 2:
        d = d[..., None]
    if len(grid) == 0:
        out = d.new_zeros(())
    else:
        sq = _patch_sq_norms(d, torch.as_tensor(grid.masks, dtype=d.dtype))
        pos = sq > 0
        out = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                          torch.zeros_like(sq)).sum()
    return float(out) if as_numpy else out


def patch_norms(delta: np.ndarray, grid: PatchGrid) -> np.ndarray:
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim == 2:
        d = d[..., None]
    per_pixel = (d * d).sum(-1).reshape(-1)
    return np.sqrt(grid.masks.reshape(len(grid), -1).astype(np.float64) @ per_pixel)


def select_top_patches(delta: np.ndarray, grid: PatchGrid,
                       sparsity: float) -> tuple[np.ndarray, list[int]]:
    """Keep the highest-norm patches whose total area stays within (1 - S) of the parent.

    Patches are ranked by norm (descending, ties by index) and the longest
    ranked prefix that fits the pixel budget is kept; at least one patch is
    always selected, even when it alone exceeds the budget.
    """
    if len(grid) == 0:
        raise ValueError("patch grid is empty")
    if not 0.0 < sparsity < 1.0:
        raise ValueError("sparsity must lie in (0, 1)")
    norms = patch_norms(delta, grid)
    order = np.argsort(-norms, kind="stable")
    sizes = grid.masks.reshape(len(grid), -1).sum(1)[order]
    budget = (1.0 - sparsity) * int(grid.parent.sum())
    n = max(1, int(np.searchsorted(np.cumsum(sizes), budget, side="right")))
    chosen = [int(i) for i in order[:n]]
    return grid.union(chosen), chosen


def _optimize(model, x, m_support, f, clean, tgt, delta0, grid_masks, lam1, lam2, iters,
              cfg: AdaptiveConfig, history: list[dict], stage: int) -> torch.Tensor:
    delta = (delta0 * m_support).clone().requires_grad_(True)
    opt = torch.optim.Adam([delta], lr=cfg.optimizer_lr)
    for k in range(1, iters + 1):
        adv = x + m_support * delta
        if cfg.clamp_to_valid_range:
            adv = torch.clamp(adv, 0.0, 1.0)
        logits = model.logits_tensor(adv)
        j = attack_loss(torch.softmax(logits, -1), clean, tgt, f, "targeted",
                        cfg.confidence_threshold, cfg.loss_reduction)
        md = m_support * delta
        total = j + lam1 * (md * md).sum()
        if lam2 > 0:
            sq = _patch_sq_norms(md, grid_masks)
            pos = sq > 0
            total = total + lam2 * torch.where(
                pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq)).sum()
        if not torch.isfinite(total):
            raise AttackError(f"non-finite adaptive objective in stage {stage}, iteration {k}")
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            delta.mul_(m_support)
            delta[delta.abs() < cfg.clip_threshold] = 0.0
        history.append({"stage": stage, "iteration": k, "loss": float(total.detach()),
                        "attack_loss": float(j.detach())})
    return delta.detach()


def adaptive_attack(model, image: np.ndarray, M: np.ndarray, F: np.ndarray,
                    target: TargetMap, cfg: AdaptiveConfig) -> AttackResult:
    x, M, F, clean, tgt = prepare(model, image, M, F, "targeted", target)
    grid = patch_partition(M, cfg.patch_h, cfg.patch_w)
    if len(grid) == 0:
        raise ValueError("perturbation mask is empty")
    f = torch.as_tensor(F).bool()
    m = torch.as_tensor(M, dtype=x.dtype)[..., None]
    grid_masks = torch.as_tensor(grid.masks, dtype=x.dtype)
    history: list[dict] = []

    delta1 = _optimize(model, x, m, f, clean, tgt, torch.zeros_like(x), grid_masks,
                       cfg.lambda1, cfg.lambda2_stage1, cfg.iters_stage1, cfg, history, 1)
    if not torch.any(delta1 != 0):
        raise AttackError("no active patches: stage 1 drove the whole perturbation to zero")
    selected_mask, chosen = select_top_patches(delta1.numpy(), grid, cfg.sparsity)

    sel = torch.as_tensor(selected_mask, dtype=x.dtype)[..., None]
    start = delta1 if cfg.warm_start else torch.zeros_like(x)
    delta2 = _optimize(model, x, sel, f, clean, tgt, start, grid_masks,
                       cfg.lambda1, 0.0, cfg.iters_stage2, cfg, history, 2)
    result = finalize_result(model, image, delta2, selected_mask, F,
                             clean.numpy().astype(np.uint8), "targeted", target,
                             cfg.clamp_to_valid_range, cfg.iters_stage1 + cfg.iters_stage2,
                             False, history, cfg.to_dict(), selected=chosen, parent_mask=M)
    return result
