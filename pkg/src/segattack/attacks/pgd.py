"""Masked projected gradient descent for indirect local attacks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from segattack import io, metrics
from segattack.attacks.loss import MODES, attack_loss
from segattack.masks import TargetMap, as_mask
from segattack.models import Model, check_image

NORMS = ("inf", "two")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "targeted"
    norm: str = "inf"
    step_size: float = 1e-3
    budget: float | None = None  # None: 100 * step_size for inf, 100 for two
    max_iters: int = 100
    early_stop_asr: float = 0.9
    confidence_threshold: float = 0.3
    clamp_to_valid_range: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.step_size < 0 or (self.budget is not None and self.budget < 0):
            raise ValueError("step_size and budget must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not 0.0 <= self.early_stop_asr <= 1.0:
            raise ValueError("early_stop_asr must lie in [0, 1]")

    @property
    def eps(self) -> float:
        if self.budget is not None:
            return float(self.budget)
        return 100.0 * self.step_size if self.norm == "inf" else 100.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eps"] = self.eps
        return d


@dataclass
class Perturbation:
    delta: np.ndarray  # H x W x C
    support_mask: np.ndarray  # H x W

    def apply(self, image: np.ndarray, clamp: bool = True) -> np.ndarray:
        adv = np.asarray(image) + self.support_mask[..., None].astype(self.delta.dtype) * self.delta
        return np.clip(adv, 0, 1).astype(np.asarray(image).dtype) if clamp else adv


@dataclass
class AttackResult:
    perturbation: Perturbation
    adversarial_image: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    iterations_used: int
    terminated_early: bool
    metrics: dict
    selected_patches: list[int] | None = None
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def save_result(result: AttackResult, directory: str | Path, extra: dict | None = None) -> dict:
    """Write one attack's artifacts; returns the file names keyed by role.

    delta and the adversarial image go to ``.npy`` (exact floats); the
    adversarial image, both prediction maps and the support mask are also
    written as 8-bit PNGs for viewing.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "delta": "delta.npy",
        "adversarial": "adversarial.npy",
        "adversarial_png": "adversarial.png",
        "clean_pred": "clean_pred.png",
        "adv_pred": "adv_pred.png",
        "support": "support.png",
        "metrics": "metrics.json",
        "config": "config.json",
    }
    io.save_tensor(d / files["delta"], result.perturbation.delta)
    io.save_tensor(d / files["adversarial"], result.adversarial_image)
    io.save_rgb(d / files["adversarial_png"], result.adversarial_image)
    io.save_gray8(d / files["clean_pred"], result.clean_pred)
    io.save_gray8(d / files["adv_pred"], result.adv_pred)
    io.save_mask(d / files["support"], result.perturbation.support_mask)
    io.write_json(d / files["config"], result.config)
    io.write_json(d / files["metrics"], {
        "metrics": result.metrics,
        "iterations_used": result.iterations_used,
        "terminated_early": result.terminated_early,
        "selected_patches": result.selected_patches,
        **(extra or {}),
    })
    return files


def lp_norm(delta, p: str) -> float:
    d = delta.detach().double() if isinstance(delta, torch.Tensor) else torch.as_tensor(
        np.asarray(delta, dtype=np.float64))
    if d.numel() == 0:
        return 0.0
    return float(d.abs().max()) if p == "inf" else float(torch.sqrt(torch.sum(d * d)))


def _project_tensor(delta: torch.Tensor, mask: torch.Tensor, p: str, eps: float) -> torch.Tensor:
    out = delta * mask
    if p == "inf":
        # largest radius representable in the tensor's dtype that does not exceed eps
        e = torch.tensor(eps, dtype=out.dtype)
        if float(e) > eps:
            e = torch.nextafter(e, torch.zeros_like(e))
        return torch.clamp(out, -e, e)
    if p != "two":
        raise ValueError(f"unknown norm {p!r}")
    norm = lp_norm(out, "two")
    if norm <= eps:
        return out
    scale = eps / norm
    res = (out.double() * scale).to(out.dtype)
    # rounding of the rescaled entries may overshoot the ball by an ulp
    while lp_norm(res, "two") > eps:
        scale = math.nextafter(scale, 0.0) * (1.0 - 4 * torch.finfo(out.dtype).eps)
        res = (out.double() * scale).to(out.dtype)
    return res


def project(delta: np.ndarray, M: np.ndarray, p: str, eps: float) -> Perturbation:
    """Euclidean projection of ``delta`` onto {d : d = 0 outside M, ||d||_p <= eps}."""
    d = torch.as_tensor(np.array(delta))
    m = torch.as_tensor(as_mask(M)).to(d.dtype)
    if d.dim() == 3:
        m = m[..., None]
    return Perturbation(delta=_project_tensor(d, m, p, eps).numpy(), support_mask=as_mask(M))


def _success_rate(pred: torch.Tensor, f: torch.Tensor, mode: str, clean: torch.Tensor,
                  target: torch.Tensor | None) -> float:
    ref = target if mode == "targeted" else clean
    hit = (pred == ref) if mode == "targeted" else (pred != ref)
    return float((hit & f).sum()) / float(f.sum())


def finalize_result(model: Model, image: np.ndarray, delta: torch.Tensor, M: np.ndarray,
                    F: np.ndarray, clean_pred: np.ndarray, mode: str, target: TargetMap | None,
                    clamp: bool, iterations_used: int, terminated_early: bool,
                    history: list[dict], config: dict,
                    selected: list[int] | None = None,
                    parent_mask: np.ndarray | None = None) -> AttackResult:
    pert = Perturbation(delta=(delta.detach() * torch.as_tensor(M, dtype=delta.dtype)[..., None]).numpy(),
                        support_mask=as_mask(M))
    adv = pert.apply(image, clamp=clamp)
    with torch.no_grad():
        adv_pred = model.logits_tensor(torch.as_tensor(adv, dtype=model.dtype)).argmax(-1)
    adv_pred = adv_pred.numpy().astype(np.uint8)
    snap = metrics.region_metrics(
        adv_pred, clean_pred, F, pert.delta, model.spec.num_classes,
        target=None if target is None else target.grid,
        parent_mask=parent_mask if parent_mask is not None else M)
    return AttackResult(perturbation=pert, adversarial_image=adv, clean_pred=clean_pred,
                        adv_pred=adv_pred, iterations_used=iterations_used,
                        terminated_early=terminated_early, metrics=snap.to_dict(),
                        selected_patches=selected, history=history, config=config)


def prepare(model: Model, image: np.ndarray, M: np.ndarray, F: np.ndarray,
            mode: str, target: TargetMap | None):
    check_image(model, image)
    M, F = as_mask(M), as_mask(F)
    if M.shape != F.shape or M.shape != np.shape(image)[:2]:
        raise ValueError("mask shapes must match the image")
    if not F.any():
        raise ValueError("fooling mask is empty: nothing to fool")
    if (mode == "targeted") != (target is not None):
        raise ValueError("a target map is required for targeted attacks and only for them")
    if target is not None and np.any(F & (target.valid == 0)):
        raise ValueError("target map must be defined on every fooling pixel")
    x = torch.as_tensor(np.asarray(image), dtype=model.dtype)
    with torch.no_grad():
        clean = model.logits_tensor(x).argmax(-1)
    tgt = None if target is None else torch.as_tensor(target.grid.astype(np.int64))
    return x, M, F, clean, tgt


def pgd_attack(model: Model, image: np.ndarray, M: np.ndarray, F: np.ndarray,
               config: AttackConfig, target: TargetMap | None = None) -> AttackResult:
    """Iterate delta <- project(delta - step * direction) on the masked objective.

    The direction is sign(grad) for the inf-norm and grad / ||grad||_2 for the
    2-norm. Success on F is measured before every step; the loop ends once it
    reaches ``early_stop_asr`` or after ``max_iters`` steps.
    """
    x, M, F, clean, tgt = prepare(model, image, M, F, config.mode, target)
    m = torch.as_tensor(M, dtype=x.dtype)[..., None]
    f = torch.as_tensor(F).bool()
    eps, alpha = config.eps, config.step_size
    delta = torch.zeros_like(x)
    history: list[dict] = []
    used, early = 0, False
    for k in range(1, config.max_iters + 1):
        used = k
        d = delta.clone().requires_grad_(True)
        adv = x + m * d
        if config.clamp_to_valid_range:
            adv = torch.clamp(adv, 0.0, 1.0)
        logits = model.logits_tensor(adv)
        rate = _success_rate(logits.detach().argmax(-1), f, config.mode, clean, tgt)
        if rate >= config.early_stop_asr:
            history.append({"iteration": k, "asr": rate})
            early = True
            break
        loss = attack_loss(torch.softmax(logits, -1), clean, tgt, f, config.mode,
                           config.confidence_threshold)
        if not torch.isfinite(loss):
            raise AttackError(f"non-finite attack loss at iteration {k}")
        (grad,) = torch.autograd.grad(loss, d)
        with torch.no_grad():
            if config.norm == "inf":
                step = torch.sign(grad)
            else:
                gn = lp_norm(grad, "two")
                step = grad / gn if gn > 0 else torch.zeros_like(grad)
            delta = _project_tensor(delta - alpha * step, m, config.norm, eps)
        history.append({"iteration": k, "asr": rate, "loss": float(loss.detach()),
                        "norm": lp_norm(delta, config.norm)})
    return finalize_result(model, image, delta, M, F, clean.numpy().astype(np.uint8),
                           config.mode, target, config.clamp_to_valid_range, used, early,
                           history, config.to_dict())
