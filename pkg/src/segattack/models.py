"""Context-controllable segmentation models.

Three variants share one layout: a trunk of stride-1, zero-padded conv blocks,
an optional global-context branch and a two-layer 1x1 classifier head.

======================  =====================================  ============
variant                 feature taps (all H x W spatially)     radius
======================  =====================================  ============
local                   block1..blockN, classifier             N*(k-1)/2
dilated                 block1..blockN, classifier             sum(d)*(k-1)/2
global_context          block1..blockN, context_merge,         unbounded
                        classifier
======================  =====================================  ============

``blocki`` has ``channel_widths[i-1]`` channels, ``context_merge`` has
``channel_widths[-1] + context_width`` (trunk features concatenated with the
broadcast pooled context vector) and ``classifier`` has ``head_width``
channels: it is the hidden layer feeding the final 1x1 logit projection.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tF

from segattack import io

VARIANTS = ("local", "dilated", "global_context")
UNBOUNDED = "unbounded"


class ModelSpecError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "local"
    num_classes: int = 5
    channel_widths: tuple[int, ...] = (16, 16, 16, 16)
    kernel_size: int = 3
    dilations: tuple[int, ...] | None = None
    head_width: int = 32
    context_width: int = 16
    in_channels: int = 3
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.dilations is not None:
            object.__setattr__(self, "dilations", tuple(self.dilations))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelSpecError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ModelSpecError("num_classes must be >= 2")
        if not self.channel_widths or min(self.channel_widths) < 1:
            raise ModelSpecError("channel_widths must be a non-empty list of positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ModelSpecError("kernel_size must be a positive odd integer")
        if self.variant == "dilated":
            if self.dilations is None:
                raise ModelSpecError("dilated variant requires a dilations list")
            if len(self.dilations) != len(self.channel_widths) or min(self.dilations) < 1:
                raise ModelSpecError("need one positive dilation per conv block")
        elif self.dilations is not None and any(d != 1 for d in self.dilations):
            raise ModelSpecError(f"{self.variant} variant uses unit dilations only")

    @property
    def block_dilations(self) -> tuple[int, ...]:
        if self.variant == "dilated":
            return self.dilations  # type: ignore[return-value]
        return (1,) * len(self.channel_widths)

    def tap_names(self) -> list[str]:
        names = [f"block{i + 1}" for i in range(len(self.channel_widths))]
        if self.variant == "global_context":
            names.append("context_merge")
        names.append("classifier")
        return names

    def tap_channels(self) -> list[int]:
        ch = list(self.channel_widths)
        if self.variant == "global_context":
            ch.append(self.channel_widths[-1] + self.context_width)
        ch.append(self.head_width)
        return ch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_miou: float | None = None
    train_pixel_accuracy: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class FeatureStack:
    layers: list[tuple[str, np.ndarray]]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.layers)

    def __getitem__(self, name: str) -> np.ndarray:
        for n, f in self.layers:
            if n == name:
                return f
        raise KeyError(name)


class SegNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        blocks = []
        cin = spec.in_channels
        for width, d in zip(spec.channel_widths, spec.block_dilations):
            blocks.append(nn.Conv2d(cin, width, k, padding=d * (k - 1) // 2, dilation=d))
            cin = width
        self.blocks = nn.ModuleList(blocks)
        if spec.variant == "global_context":
            self.context = nn.Linear(cin, spec.context_width)
            cin += spec.context_width
        self.head = nn.Conv2d(cin, spec.head_width, 1)
        self.logits = nn.Conv2d(spec.head_width, spec.num_classes, 1)

    def forward(self, x: torch.Tensor, taps: dict | None = None) -> torch.Tensor:
        for i, conv in enumerate(self.blocks):
            x = tF.relu(conv(x))
            if taps is not None:
                taps[f"block{i + 1}"] = x
        if self.spec.variant == "global_context":
            g = tF.relu(self.context(x.mean(dim=(2, 3))))
            g = g[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
            x = torch.cat([x, g], dim=1)
            if taps is not None:
                taps["context_merge"] = x
        x = tF.relu(self.head(x))
        if taps is not None:
            taps["classifier"] = x
        return self.logits(x)


@dataclass
class Model:
    spec: ModelSpec
    net: SegNet
    train_config: TrainConfig | None = None
    report: TrainReport | None = None

    @property
    def tap_names(self) -> list[str]:
        return self.spec.tap_names()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def to_tensor(self, image: np.ndarray) -> torch.Tensor:
        check_image(self, image)
        return torch.as_tensor(np.asarray(image), dtype=self.dtype).permute(2, 0, 1)[None]

    def logits_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """H x W x C tensor in, H x W x K logits out (differentiable)."""
        return self.net(x.permute(2, 0, 1)[None])[0].permute(1, 2, 0)

    def to(self, dtype: torch.dtype) -> "Model":
        self.net.to(dtype)
        return self


def check_image(model: Model, image: np.ndarray) -> None:
    shape = tuple(np.shape(image))
    H, W = model.spec.image_size
    if shape != (H, W, model.spec.in_channels):
        raise ValueError(f"image shape {shape} does not match model input "
                         f"{(H, W, model.spec.in_channels)}")


def build_model(spec: ModelSpec) -> Model:
    spec.validate()
    g = torch.Generator().manual_seed(spec.seed)
    net = SegNet(spec)
    with torch.no_grad():
        for p in net.parameters():
            if p.dim() > 1:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=g) * math.sqrt(2.0 / fan_in))
            else:
                p.zero_()
    net.eval()
    return Model(spec=spec, net=net)


def receptive_field_radius(spec: ModelSpec) -> int | str:
    """Chebyshev radius of the input region that can influence one output pixel."""
    if spec.variant == "global_context":
        return UNBOUNDED
    return sum(d * (spec.kernel_size - 1) // 2 for d in spec.block_dilations)


def _stack(dataset, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    samples = dataset.subset(split) if isinstance(split, str) else split
    x = torch.as_tensor(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float()
    y = torch.as_tensor(np.stack([s.labels for s in samples]).astype(np.int64))
    return x, y


def train_model(model: Model, dataset, cfg: TrainConfig, split: str = "train",
                log: Callable[[str], None] | None = None) -> TrainReport:
    """Minimize the mean per-pixel cross-entropy over ``split`` with Adam."""
    from segattack.metrics import miou

    K = model.spec.num_classes
    x, y = _stack(dataset, split)
    if y.numel() and int(y.max()) >= K:
        raise ValueError(f"dataset label {int(y.max())} >= num_classes {K}")
    x = x.to(model.dtype)
    report = TrainReport()
    net = model.net
    if cfg.epochs > 0:
        torch.manual_seed(cfg.seed)
        g = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        net.train()
        n = x.shape[0]
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=g)
            total, count = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                loss = tF.cross_entropy(net(x[idx]), y[idx])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            report.epoch_losses.append(total / count)
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {report.epoch_losses[-1]:.5f}")
        net.eval()
    with torch.no_grad():
        pred = net(x).argmax(1)
    report.train_pixel_accuracy = float((pred == y).double().mean())
    if dataset.splits.get("val"):
        vx, vy = _stack(dataset, "val")
        with torch.no_grad():
            vpred = net(vx.to(model.dtype)).argmax(1).numpy()
        full = np.ones(vy.shape[1:], dtype=np.uint8)
        report.val_miou = float(np.mean([miou(p, t, full, K) for p, t in zip(vpred, vy.numpy())]))
    model.train_config = cfg
    model.report = report
    return report


def predict(model: Model, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (logits, probs, labels); argmax ties resolve to the lowest index."""
    x = model.to_tensor(image)
    with torch.no_grad():
        logits = model.net(x)[0].permute(1, 2, 0)
    logits_np = logits.numpy()
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    return logits_np, probs, np.argmax(logits_np, axis=-1).astype(np.uint8)


def predict_labels(model: Model, image: np.ndarray) -> np.ndarray:
    return predict(model, image)[2]


def extract_features(model: Model, image: np.ndarray) -> FeatureStack:
    taps: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        model.net(model.to_tensor(image), taps=taps)
    return FeatureStack([(n, taps[n][0].permute(1, 2, 0).numpy().copy()) for n in model.tap_names])


def input_gradient(model: Model, image: np.ndarray,
                   loss_value_fn: Callable[[torch.Tensor], torch.Tensor]) -> np.ndarray:
    """Exact gradient of ``loss_value_fn(logits)`` with respect to the input image.

    ``loss_value_fn`` receives the H x W x K logits tensor and must return a
    scalar tensor.
    """
    check_image(model, image)
    x = torch.as_tensor(np.asarray(image), dtype=model.dtype).clone().requires_grad_(True)
    value = loss_value_fn(model.logits_tensor(x))
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise TypeError("loss_value_fn must return a scalar torch tensor")
    if not value.requires_grad:
        if value.grad_fn is None and not torch.is_floating_point(value):
            raise TypeError("loss_value_fn returned a non-differentiable value")
        return np.zeros(np.shape(image), dtype=x.detach().numpy().dtype)
    (grad,) = torch.autograd.grad(value.reshape(()), x, allow_unused=True)
    if grad is None:
        return np.zeros(np.shape(image), dtype=x.detach().numpy().dtype)
    return grad.numpy()


def save_model(model: Model, directory: str | Path, metrics: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    np.savez(d / "params.npz", **params)
    manifest = {
        "schema_version": io.SCHEMA_VERSION,
        "kind": "segattack.model",
        "spec": model.spec.to_dict(),
        "seed": model.spec.seed,
        "dtype": str(model.dtype).replace("torch.", ""),
        "train_config": dataclasses.asdict(model.train_config) if model.train_config else None,
        "report": model.report.to_dict() if model.report else None,
        "metrics": metrics or {},
        "parameters": {k: list(v.shape) for k, v in params.items()},
        "params_sha256": io.sha256_file(d / "params.npz"),
    }
    io.write_json(d / "manifest.json", manifest)
    return d


def load_model(directory: str | Path) -> Model:
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise FileNotFoundError(f"missing manifest: {d / 'manifest.json'}")
    manifest = io.read_json(d / "manifest.json")
    if manifest.get("kind") != "segattack.model":
        raise ValueError(f"{d} is not a model checkpoint")
    if io.sha256_file(d / "params.npz") != manifest["params_sha256"]:
        raise io.ChecksumError(f"checksum mismatch for {d / 'params.npz'}")
    model = build_model(ModelSpec.from_dict(manifest["spec"]))
    model.to(getattr(torch, manifest.get("dtype", "float32")))
    with np.load(d / "params.npz") as z:
        state = {k: torch.as_tensor(z[k]) for k in z.files}
    model.net.load_state_dict(state)
    if manifest.get("train_config"):
        model.train_config = TrainConfig(**manifest["train_config"])
    if manifest.get("report"):
        model.report = TrainReport(**manifest["report"])
    return model
