"""A single image-agnostic perturbation confined to a fixed mask (untargeted)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from segattack.attacks.loss import attack_loss
from segattack.attacks.pgd import AttackError, Perturbation, _project_tensor
from segattack.masks import as_mask
from segattack.models import Model, check_image


@dataclass(frozen=True)
class UniversalConfig:
    epochs: int = 200
    step_size: float = 1e-3
    patch_h: int = 8
    patch_w: int = 16
    train_image_count: int | None = None  # None: use every training image
    budget: float = 0.3  # inf-norm radius
    clamp_to_valid_range: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.step_size <= 0 or self.budget <= 0:
            raise ValueError("epochs >= 0, step_size > 0 and budget > 0 required")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ValueError("patch size must be >= 1")
        if self.train_image_count is not None and self.train_image_count < 1:
            raise ValueError("train_image_count must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def universal_attack(model: Model, train_images: Sequence[np.ndarray], M: np.ndarray,
                     cfg: UniversalConfig, log=None) -> Perturbation:
    """Learn one perturbation on ``M`` that changes predictions across all images.

    Each epoch visits the training images in order and takes one sign-gradient
    step per image on the shared perturbation, followed by projection onto the
    inf-ball on ``M``. Every pixel of every image is in the fooling region.
    """
    images = list(train_images)[:cfg.train_image_count]
    if not images:
        raise ValueError("empty training set")
    for im in images:
        check_image(model, im)
    M = as_mask(M)
    m = torch.as_tensor(M, dtype=model.dtype)[..., None]
    xs = [torch.as_tensor(np.asarray(im), dtype=model.dtype) for im in images]
    with torch.no_grad():
        preds = [model.logits_tensor(x).argmax(-1) for x in xs]
    fool_all = torch.ones(M.shape, dtype=torch.bool)
    delta = torch.zeros_like(xs[0])
    for epoch in range(cfg.epochs):
        total = 0.0
        for x, y in zip(xs, preds):
            d = delta.clone().requires_grad_(True)
            adv = x + m * d
            if cfg.clamp_to_valid_range:
                adv = torch.clamp(adv, 0.0, 1.0)
            loss = attack_loss(torch.softmax(model.logits_tensor(adv), -1), y, None,
                               fool_all, "untargeted")
            if not torch.isfinite(loss):
                raise AttackError(f"non-finite loss in epoch {epoch}")
            (g,) = torch.autograd.grad(loss, d)
            with torch.no_grad():
                delta = _project_tensor(delta - cfg.step_size * torch.sign(g), m, "inf", cfg.budget)
            total += float(loss.detach())
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} mean loss {total / len(xs):.5f}")
    return Perturbation(delta=(delta * m).numpy(), support_mask=M)
