"""Experiment pipelines behind the command line.

A run directory holds::

    config.json     resolved ExperimentConfig
    run.json        RunRecord: per-image metrics, aggregates, artifact paths
    metrics.csv     one row per (image, distance) work item
    log.txt
    model/          checkpoint, when the run trained its own model
    images/<idx>/   per-image attack artifacts (see attacks.save_result)
    universal/      shared perturbation of a universal_patch run
    detection/      profile + detector checkpoint and score maps, when enabled
    error.json      only when the run failed
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

import segattack
from segattack import detection as det
from segattack import io, masks, metrics, repro
from segattack.attacks import adaptive_attack, pgd_attack, save_result, universal_attack
from segattack.attacks.pgd import finalize_result
from segattack.config import ExperimentConfig, apply_overrides
from segattack.models import Model, build_model, load_model, predict_labels, save_model, train_model
from segattack.scenegen import Dataset, SceneConfig, generate_dataset, load_dataset

log = logging.getLogger("segattack")

METRIC_KEYS = ("asr_t", "asr_u", "miou_u", "preserved_rate", "perceptibility_linf",
               "perceptibility_l2", "sparsity")


@dataclass
class RunRecord:
    config: dict
    setting: str
    per_image: list[dict]
    aggregates: dict
    artifacts: dict[str, str]
    wall_clock_s: float
    deterministic: bool
    axis: dict = field(default_factory=dict)
    detection: dict | None = None
    toolkit_version: str = segattack.__version__
    schema_version: int = io.SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class _Item:
    """One attacked image, kept in memory for the detection stage."""

    index: int
    clean: np.ndarray
    adversarial: np.ndarray
    fooled: np.ndarray
    directory: str


# -- data and model -----------------------------------------------------------

def load_or_generate_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset.path:
        return load_dataset(cfg.dataset.path)
    return generate_dataset(cfg.scene_config(), cfg.dataset.n, cfg.dataset.split_fractions)


def load_or_train_model(cfg: ExperimentConfig, data: Dataset, run_dir: Path | None) -> Model:
    if cfg.model.path:
        model = load_model(cfg.model.path)
        if model.spec.num_classes != data.config.num_classes:
            raise ValueError(f"model has {model.spec.num_classes} classes, "
                             f"dataset has {data.config.num_classes}")
        return model
    spec = cfg.model_spec(data.config.num_classes)
    model = build_model(spec)
    log.info("training %s model (%d epochs)", spec.variant, cfg.train_config().epochs)
    report = train_model(model, data, cfg.train_config())
    log.info("validation mIoU %.4f", report.val_miou if report.val_miou is not None else float("nan"))
    if run_dir is not None:
        save_model(model, run_dir / "model")
    return model


# -- per-image work -----------------------------------------------------------

def _attack_one(cfg: ExperimentConfig, model: Model, scene: SceneConfig, index: int,
                image: np.ndarray, run_dir: Path, d: float | None = None) -> tuple[dict, _Item | None]:
    rec: dict = {"index": index}
    if d is not None:
        rec["d"] = d
    sub = f"images/{index:06d}" + ("" if d is None else f"/d{d:g}")
    pred = predict_labels(model, image)
    H, W = pred.shape
    target = None
    if cfg.setting == "global":
        M = F = np.ones((H, W), dtype=np.uint8)
    else:
        if not np.isin(pred, scene.dynamic_ids).any():
            rec.update(status="skipped", reason="no predicted dynamic pixels")
            return rec, None
        F = masks.class_mask(pred, scene.dynamic_ids)
        if cfg.setting == "distance_sweep":
            M = masks.distance_mask(pred, scene.dynamic_ids, d, scene.static_ids)
        else:
            M = masks.class_mask(pred, scene.static_ids) if np.isin(pred, scene.static_ids).any() \
                else np.zeros_like(pred)
        if not M.any():
            rec.update(status="skipped", reason="empty perturbation mask")
            return rec, None
        if cfg.attack_config().mode == "targeted" or cfg.setting == "adaptive_patch":
            target = masks.nearest_static_target(pred, scene.static_ids, scene.dynamic_ids)
    if cfg.setting == "adaptive_patch":
        result = adaptive_attack(model, image, M, F, target, cfg.adaptive_config())
    else:
        result = pgd_attack(model, image, M, F, cfg.attack_config(), target)
    files = save_result(result, run_dir / sub, {"index": index, "d": d})
    io.save_tensor(run_dir / sub / "clean.npy", np.asarray(image))
    rec.update(status="ok", metrics=result.metrics, iterations_used=result.iterations_used,
               artifacts={k: f"{sub}/{v}" for k, v in {**files, "clean": "clean.npy"}.items()})
    if result.selected_patches is not None:
        rec["selected_patches"] = result.selected_patches
    return rec, _Item(index, np.asarray(image), result.adversarial_image,
                      result.adv_pred != result.clean_pred, sub)


def _universal(cfg: ExperimentConfig, model: Model, data: Dataset, indices: list[int],
               run_dir: Path) -> tuple[list[dict], list[_Item], dict]:
    H, W = data.config.height, data.config.width
    h, w = masks.patch_size_for_area(H, W, cfg.universal.area)
    M = masks.center_patch_mask(H, W, h, w)
    ucfg = cfg.universal_config(h, w)
    train_images = [s.image for s in data.subset("train")]
    pert = universal_attack(model, train_images, M, ucfg, log=log.debug)
    (run_dir / "universal").mkdir(parents=True, exist_ok=True)
    io.save_tensor(run_dir / "universal/delta.npy", pert.delta)
    io.save_mask(run_dir / "universal/support.png", M)
    io.write_json(run_dir / "universal/config.json", ucfg.to_dict())
    F = np.ones((H, W), dtype=np.uint8)
    records, items = [], []
    for i in indices:
        image = data.samples[i].image
        clean = predict_labels(model, image)
        result = finalize_result(model, image, torch.as_tensor(pert.delta), M, F, clean, "untargeted", None,
                                 ucfg.clamp_to_valid_range, ucfg.epochs, False, [], ucfg.to_dict())
        sub = f"images/{i:06d}"
        files = save_result(result, run_dir / sub, {"index": i})
        io.save_tensor(run_dir / sub / "clean.npy", np.asarray(image))
        records.append({"index": i, "status": "ok", "metrics": result.metrics,
                        "artifacts": {k: f"{sub}/{v}" for k, v in {**files, "clean": "clean.npy"}.items()}})
        items.append(_Item(i, np.asarray(image), result.adversarial_image,
                           result.adv_pred != result.clean_pred, sub))
    axis = {"patch_area": cfg.universal.area, "patch_h": h, "patch_w": w}
    return records, items, axis


# -- detection ----------------------------------------------------------------

def run_detection(model: Model, profile_samples: Sequence, items: Sequence[_Item], out_dir: Path,
                  seed: int, train_fraction: float = 0.8, labels_source: str = "ground_truth",
                  eps_reg: float = 1e-3, profile: det.GaussianProfile | None = None) -> dict:
    """Fit (unless given) a profile, then fit and evaluate both detectors on clean/attacked pairs.

    Every attacked image contributes itself and its clean original, so the
    evaluation set is balanced; the 80/20 split is over these images.
    """
    if profile is None:
        profile = det.fit_profile(model, profile_samples, labels_source, eps_reg)
    H, W = items[0].clean.shape[:2]
    stacks, fooled, vectors, attacked = [], [], [], []
    for it in items:
        for img, fm, is_adv in ((it.clean, np.zeros((H, W), bool), False),
                                (it.adversarial, it.fooled, True)):
            _, st, vec = det.score_image(model, img, profile)
            stacks.append(st)
            fooled.append(fm)
            vectors.append(vec)
            attacked.append(is_adv)
    names = model.tap_names
    pix = det.fit_pixel_detector(stacks, fooled, names, train_fraction, seed)
    img = det.fit_image_detector(vectors, attacked, names, train_fraction, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    det.save_detection(out_dir / "checkpoint", profile, pix, img)
    maps = {}
    for it in items:
        res = det.detect(it.adversarial, model, profile, pix, img)
        name = f"scores_{it.index:06d}"
        io.save_tensor(out_dir / f"{name}.npy", res.pixel_scores)
        io.save_gray16(out_dir / f"{name}.png", res.pixel_scores, 0.0, 1.0)
        maps[it.index] = f"{name}.png"
    summary = {"pixel_auroc": pix.heldout_auroc, "image_auroc": img.heldout_auroc,
               "n_images": len(stacks), "train_fraction": train_fraction, "score_maps": maps}
    io.write_json(out_dir / "summary.json", summary)
    return summary


# -- run ----------------------------------------------------------------------

def _setup_logging(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "log.txt", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _aggregate(per_image: list[dict], key: str | None) -> dict:
    ok = [r for r in per_image if r["status"] == "ok"]
    groups: dict[str, list[dict]] = {}
    for r in ok:
        label = "all" if key is None else f"{key}={r[key]:g}"
        groups.setdefault(label, []).append(r["metrics"])
    out = {label: metrics.aggregate(recs, METRIC_KEYS) for label, recs in groups.items()}
    out["skipped"] = sum(r["status"] == "skipped" for r in per_image)
    return out


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None,
        model: Model | None = None, data: Dataset | None = None) -> RunRecord:
    """Execute the configured pipeline and write a complete run directory.

    ``model``/``data`` may be passed in to reuse objects already in memory;
    they must be what the config describes for the record to be reproducible.
    """
    cfg.validate()
    deterministic = repro.apply_env()
    run_dir = Path(out_dir or cfg.output_dir or "runs/run")
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _setup_logging(run_dir)
    t0 = time.perf_counter()
    try:
        io.write_json(run_dir / "config.json", cfg.to_dict())
        data = data if data is not None else load_or_generate_data(cfg)
        model = model if model is not None else load_or_train_model(cfg, data, run_dir)
        split = data.splits[cfg.images.split]
        indices = split[:cfg.images.limit] if cfg.images.limit else list(split)
        scene = data.config
        axis: dict = {}
        group_key = None
        if cfg.setting == "universal_patch":
            per_image, items, axis = _universal(cfg, model, data, indices, run_dir)
        else:
            jobs = [(i, d) for i in indices
                    for d in (cfg.distances if cfg.setting == "distance_sweep" else [None])]

            def work(job):
                i, d = job
                return _attack_one(cfg, model, scene, i, data.samples[i].image, run_dir, d)

            if cfg.workers > 1 and not deterministic:
                with ThreadPoolExecutor(cfg.workers) as pool:
                    results = list(pool.map(work, jobs))
            else:
                results = [work(j) for j in jobs]
            per_image = [r for r, _ in results]
            items = [it for _, it in results if it is not None]
            for r in per_image:
                if r["status"] == "skipped":
                    log.info("image %d skipped: %s", r["index"], r["reason"])
            if cfg.setting == "distance_sweep":
                group_key = "d"
                axis = {"distances": list(cfg.distances)}
            elif cfg.setting == "adaptive_patch":
                axis = {"sparsity": cfg.adaptive_config().sparsity}
            else:
                ac = cfg.attack_config()
                axis = {"step_size": ac.step_size, "norm": ac.norm, "eps": ac.eps}
        aggregates = _aggregate(per_image, group_key)
        rows = [{"index": r["index"], **({"d": r["d"]} if "d" in r else {}), "status": r["status"],
                 "reason": r.get("reason"), **(r.get("metrics") or {})} for r in per_image]
        metrics.write_csv(run_dir / "metrics.csv", rows)
        detection_summary = None
        artifacts = {"config": "config.json", "metrics_csv": "metrics.csv", "log": "log.txt"}
        if (run_dir / "model" / "manifest.json").is_file():
            artifacts["model"] = "model/manifest.json"
        if cfg.setting == "universal_patch":
            artifacts["universal_delta"] = "universal/delta.npy"
        if cfg.detection.enabled:
            if not items:
                raise ValueError("detection enabled but no image was attacked")
            ds_items = items if cfg.setting != "distance_sweep" else \
                [it for it in items if it.directory.endswith(f"d{cfg.distances[-1]:g}")]
            prof_samples = data.subset("train")[:cfg.detection.profile_images]
            detection_summary = run_detection(
                model, prof_samples, ds_items, run_dir / "detection", cfg.seed,
                cfg.detection.train_fraction, cfg.detection.labels_source, cfg.detection.eps_reg)
            artifacts["detection"] = "detection/summary.json"
            for r in per_image:
                m = detection_summary["score_maps"].get(r["index"])
                if m and r["status"] == "ok":
                    r.setdefault("artifacts", {})["detection_scores"] = f"detection/{m}"
        record = RunRecord(config=cfg.to_dict(), setting=cfg.setting, per_image=per_image,
                           aggregates=aggregates, artifacts=artifacts,
                           wall_clock_s=time.perf_counter() - t0, deterministic=deterministic,
                           axis=axis, detection=detection_summary)
        io.write_json(run_dir / "run.json", record.to_dict())
        _check_artifacts(run_dir, record)
        log.info("run finished in %.1fs", record.wall_clock_s)
        return record
    except Exception as e:
        write_error(run_dir, e)
        raise
    finally:
        log.removeHandler(handler)
        handler.close()


def _check_artifacts(run_dir: Path, record: RunRecord) -> None:
    paths = list(record.artifacts.values())
    for r in record.per_image:
        paths += list(r.get("artifacts", {}).values())
    missing = [p for p in paths if not (run_dir / p).is_file()]
    if missing:
        raise RuntimeError(f"run record references missing files: {missing[:5]}")


def error_record(exc: BaseException) -> dict:
    return {"error": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exception_only(type(exc), exc)[-1].strip(),
            "schema_version": io.SCHEMA_VERSION}


def write_error(run_dir: Path, exc: BaseException) -> None:
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        io.write_json(run_dir / "error.json", error_record(exc))
    except OSError:
        pass


def load_record(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "run.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing run record: {path}")
    rec = io.read_json(path)
    if rec.get("schema_version") != io.SCHEMA_VERSION or "aggregates" not in rec:
        raise ValueError(f"{path}: not a valid run record")
    return rec


def load_items(run_dir: str | Path) -> list[_Item]:
    """Clean/adversarial pairs and fooled masks of an attack run, for detection."""
    run_dir = Path(run_dir)
    rec = load_record(run_dir)
    items = []
    for r in rec["per_image"]:
        if r["status"] != "ok":
            continue
        a = r["artifacts"]
        clean_pred = io.load_gray8(run_dir / a["clean_pred"])
        adv_pred = io.load_gray8(run_dir / a["adv_pred"])
        items.append(_Item(r["index"], io.load_tensor(run_dir / a["clean"]),
                           io.load_tensor(run_dir / a["adversarial"]), adv_pred != clean_pred,
                           str(Path(a["clean"]).parent)))
    return items


# -- sweep and report -----------------------------------------------------------

def sweep(cfg: ExperimentConfig, key: str, values: Sequence, out_dir: str | Path,
          runner: Callable[..., RunRecord] = run) -> list[Path]:
    """Run one config per value of the dotted ``key``, then report over all of them.

    Datasets and trained models are shared between runs whose configs
    describe the same ones.
    """
    out = Path(out_dir)
    dirs = []
    data_cache: dict[str, Dataset] = {}
    model_cache: dict[str, Model] = {}
    for v in values:
        c = apply_overrides(cfg, [f"{key}={json.dumps(v)}"]).validate()
        d = out / f"{key}={v}"
        data_key = json.dumps([c.dataset.path, c.dataset.n, list(c.dataset.split_fractions),
                               None if c.dataset.path else c.scene_config().to_dict()], sort_keys=True)
        if data_key not in data_cache:
            data_cache[data_key] = load_or_generate_data(c)
        data = data_cache[data_key]
        model = None
        if not c.model.path:
            model_key = json.dumps([data_key, c.model_spec(data.config.num_classes).to_dict(),
                                    dataclasses.asdict(c.train_config())], sort_keys=True)
            model = model_cache.get(model_key)
            if model is None:
                runner(c, d, data=data)
                model_cache[model_key] = load_model(d / "model")
                dirs.append(d)
                continue
        runner(c, d, model=model, data=data)
        dirs.append(d)
    report(dirs, out)
    return dirs


AXES = {"adaptive_patch": ("sparsity", "by_sparsity.csv"),
        "universal_patch": ("patch_area", "by_patch_area.csv"),
        "distance_sweep": ("d", "by_distance.csv")}

_PALETTE = np.array([[107, 140, 179], [140, 112, 92], [102, 102, 110], [220, 60, 50],
                     [250, 200, 40], [60, 180, 75], [145, 30, 180], [70, 240, 240]], dtype=np.uint8)


def _colorize(labels: np.ndarray) -> np.ndarray:
    return _PALETTE[np.asarray(labels) % len(_PALETTE)]


def _outline(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) != 0
    p = np.pad(m, 1)
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~inner


def overlay(run_dir: Path, rec: dict, out: Path) -> Path | None:
    """Side-by-side panel: clean prediction | adversarial prediction | adversarial image with
    the perturbation support outlined | fooled pixels | detection heatmap (if any)."""
    from PIL import Image

    a = rec.get("artifacts", {})
    needed = ("clean_pred", "adv_pred", "adversarial", "support")
    if any(k not in a or not (run_dir / a[k]).is_file() for k in needed):
        log.warning("image %s: missing artifacts, overlay skipped", rec.get("index"))
        return None
    clean = io.load_gray8(run_dir / a["clean_pred"])
    adv = io.load_gray8(run_dir / a["adv_pred"])
    img = io.to_uint8(io.load_tensor(run_dir / a["adversarial"]))
    img[_outline(io.load_mask(run_dir / a["support"]))] = (255, 0, 255)
    fooled = np.repeat(((adv != clean) * 255).astype(np.uint8)[..., None], 3, -1)
    panels = [_colorize(clean), _colorize(adv), img, fooled]
    if "detection_scores" in a:
        npy = (run_dir / a["detection_scores"]).with_suffix(".npy")
        if npy.is_file():
            s = io.load_tensor(npy)
            heat = np.stack([s * 255, np.zeros_like(s), (1 - s) * 255], -1)
            panels.append(np.clip(np.rint(heat), 0, 255).astype(np.uint8))
    gap = np.full((clean.shape[0], 2, 3), 255, dtype=np.uint8)
    row = np.concatenate([x for p in panels for x in (p, gap)][:-1], axis=1)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(row).save(out)
    return out


def report(run_dirs: Sequence[str | Path], out_dir: str | Path, overlays: int = 4) -> dict:
    """Summary tables over runs plus a few overlay panels per run.

    Writes ``summary.csv`` (one row per run and aggregate group) and, per axis
    present, a pivot table with one row per (model, metric) and one column per
    axis value.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, skipped = [], []
    for rd in run_dirs:
        rd = Path(rd)
        try:
            rec = load_record(rd)
        except (OSError, ValueError) as e:
            log.warning("skipping %s: %s", rd, e)
            skipped.append({"run": str(rd), "reason": str(e)})
            continue
        variant = rec["config"]["model"]["spec"].get("variant", "?")
        if rec["config"]["model"].get("path"):
            variant = Path(rec["config"]["model"]["path"]).name
        for label, agg in rec["aggregates"].items():
            if not isinstance(agg, dict):
                continue
            row = {"run": rd.name, "setting": rec["setting"], "model": variant, "group": label}
            axis = rec.get("axis", {})
            if rec["setting"] == "distance_sweep":
                row["d"] = float(label.split("=", 1)[1])
            for k in ("sparsity", "patch_area", "step_size", "norm", "eps"):
                if k in axis:
                    row[f"axis_{k}" if k == "sparsity" else k] = axis[k]
            row.update(agg)
            if rec.get("detection"):
                row["pixel_auroc"] = rec["detection"].get("pixel_auroc")
                row["image_auroc"] = rec["detection"].get("image_auroc")
            rows.append(row)
        for r in [r for r in rec["per_image"] if r["status"] == "ok"][:overlays]:
            name = f"{rd.name}_{r['index']:06d}" + (f"_d{r['d']:g}" if "d" in r else "") + ".png"
            overlay(rd, r, out / "overlays" / name)
    metrics.write_csv(out / "summary.csv", rows)
    tables = {"summary": "summary.csv"}
    for setting, (axis, fname) in AXES.items():
        sel = [r for r in rows if r["setting"] == setting]
        if not sel:
            continue
        col = "axis_sparsity" if axis == "sparsity" else axis
        values = sorted({r[col] for r in sel})
        table = []
        for model in sorted({r["model"] for r in sel}):
            for m in METRIC_KEYS:
                line = {"model": model, "metric": m}
                for v in values:
                    hits = [r.get(m) for r in sel if r["model"] == model and r[col] == v]
                    hits = [h for h in hits if h is not None]
                    line[f"{axis}={v:g}"] = float(np.mean(hits)) if hits else None
                table.append(line)
        metrics.write_csv(out / fname, table)
        tables[axis] = fname
    summary = {"tables": tables, "runs": len(run_dirs) - len(skipped), "rows": len(rows),
               "skipped_runs": skipped}
    io.write_json(out / "report.json", summary)
    return summary
