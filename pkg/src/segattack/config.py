"""Experiment configuration: one versioned JSON document per run.

Example (every section except ``setting`` and ``seed`` is optional)::

    {
      "schema_version": 1,
      "setting": "full_static",
      "seed": 0,
      "dataset": {"path": null, "n": 240, "split_fractions": [0.8, 0.1, 0.1],
                  "scene": {"width": 64, "height": 64}},
      "model": {"path": null, "spec": {"variant": "global_context"},
                "train": {"epochs": 12}},
      "attack": {"norm": "inf", "step_size": 0.001},
      "adaptive": {"sparsity": 0.9},
      "universal": {"epochs": 200, "area": 0.04},
      "distances": [0, 5],
      "images": {"split": "test", "limit": 20},
      "detection": {"enabled": false},
      "output_dir": "runs/fs-global"
    }

``seed`` seeds everything that is not seeded explicitly: the scene generator,
model initialization and training order, and the detector split.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from segattack import io
from segattack.attacks.adaptive import AdaptiveConfig
from segattack.attacks.pgd import AttackConfig
from segattack.attacks.universal import UniversalConfig
from segattack.models import ModelSpec, TrainConfig
from segattack.scenegen import SceneConfig

SETTINGS = ("global", "universal_patch", "full_static", "adaptive_patch", "distance_sweep")
DEFAULT_MODE = {"global": "untargeted", "universal_patch": "untargeted", "full_static": "targeted",
                "adaptive_patch": "targeted", "distance_sweep": "targeted"}
# step-size grids of the evaluation protocol, exposed for sweeps
LINF_STEPS = (1e-5, 1e-4, 1e-3, 5e-3)
L2_STEPS = (8e-3, 4e-2, 8e-2)


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    path: str | None = None
    n: int = 240
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    scene: dict = field(default_factory=dict)


@dataclass
class ModelSection:
    path: str | None = None
    spec: dict = field(default_factory=lambda: {"variant": "global_context"})
    train: dict = field(default_factory=dict)


@dataclass
class UniversalSection:
    epochs: int = 200
    step_size: float = 1e-3
    budget: float = 0.3
    area: float = 0.04  # fraction of the image covered by the centre patch
    train_image_count: int | None = None


@dataclass
class ImagesSection:
    split: str = "test"
    limit: int | None = 20


@dataclass
class DetectionSection:
    enabled: bool = False
    profile_images: int = 100
    labels_source: str = "ground_truth"
    eps_reg: float = 1e-3
    train_fraction: float = 0.8


@dataclass
class ExperimentConfig:
    setting: str
    seed: int
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: dict = field(default_factory=dict)
    adaptive: dict = field(default_factory=dict)
    universal: UniversalSection = field(default_factory=UniversalSection)
    distances: list[float] = field(default_factory=lambda: [0, 5])
    images: ImagesSection = field(default_factory=ImagesSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    output_dir: str | None = None
    workers: int = 1
    schema_version: int = io.SCHEMA_VERSION

    # -- resolved component configs ---------------------------------------
    def scene_config(self) -> SceneConfig:
        d = {"seed": self.seed, **self.dataset.scene}
        return SceneConfig.from_dict(d)

    def model_spec(self, num_classes: int) -> ModelSpec:
        d = {"seed": self.seed, "num_classes": num_classes, **self.model.spec}
        if d.get("variant") == "dilated" and d.get("dilations") is None:
            d["dilations"] = (1, 2, 4, 8)[:len(d.get("channel_widths", (16,) * 4))]
        return ModelSpec.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.model.train})

    def attack_config(self) -> AttackConfig:
        return AttackConfig(**{"mode": DEFAULT_MODE[self.setting], **self.attack})

    def adaptive_config(self) -> AdaptiveConfig:
        return AdaptiveConfig(**self.adaptive)

    def universal_config(self, patch_h: int, patch_w: int) -> UniversalConfig:
        u = self.universal
        return UniversalConfig(epochs=u.epochs, step_size=u.step_size, patch_h=patch_h,
                               patch_w=patch_w, train_image_count=u.train_image_count,
                               budget=u.budget)

    def validate(self) -> "ExperimentConfig":
        """Reject bad values and invalid setting combinations before any compute."""
        if self.schema_version != io.SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            if self.dataset.path is None:
                scene = self.scene_config()
                if self.model.path is None:
                    self.model_spec(scene.num_classes)
            self.train_config()
            ac = self.attack_config()
            self.adaptive_config()
            u = self.universal
            UniversalConfig(epochs=u.epochs, step_size=u.step_size, budget=u.budget,
                            train_image_count=u.train_image_count)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
        if self.setting == "universal_patch" and ac.mode == "targeted":
            raise ConfigError("universal patch attacks are untargeted")
        if self.setting == "global" and ac.mode == "targeted":
            raise ConfigError("the global setting fools every pixel, which has no static target; "
                              "use mode 'untargeted'")
        if not 0 < self.universal.area <= 1:
            raise ConfigError("universal.area must lie in (0, 1]")
        if self.setting == "distance_sweep" and not self.distances:
            raise ConfigError("distance_sweep needs a non-empty distances list")
        if any(d < 0 for d in self.distances):
            raise ConfigError("distances must be >= 0")
        if self.images.split not in ("train", "val", "test"):
            raise ConfigError("images.split must be train, val or test")
        if self.images.limit is not None and self.images.limit < 1:
            raise ConfigError("images.limit must be positive")
        if not 0 < self.detection.train_fraction < 1:
            raise ConfigError("detection.train_fraction must lie in (0, 1)")
        return self

    # -- (de)serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        sections = {"dataset": DatasetSection, "model": ModelSection, "universal": UniversalSection,
                    "images": ImagesSection, "detection": DetectionSection}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("setting", "seed"):
            if key not in d:
                raise ConfigError(f"missing required key {key!r}")
        try:
            for key, typ in sections.items():
                if key in d and not isinstance(d[key], typ):
                    d[key] = typ(**(d[key] or {}))
            if "dataset" in d:
                d["dataset"].split_fractions = tuple(d["dataset"].split_fractions)
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = io.read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return ExperimentConfig.from_dict(raw)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    d = config.to_dict()
    for text in overrides:
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                if part in node and node[part] is not None:
                    raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a section")
                node[part] = {}
            node = node[part]
        node[path[-1]] = value
    return ExperimentConfig.from_dict(d)
