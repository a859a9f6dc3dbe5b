"""Command line entry point: ``segattack <command> ...``.

Every command writes into one output directory. On failure the process exits
with status 1, prints a JSON error record on stderr and, when the output
directory is known, also stores it there as ``error.json``.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from segattack import detection as det
from segattack import io, repro, runner
from segattack.config import ExperimentConfig, apply_overrides, load_config
from segattack.models import ModelSpec, TrainConfig, build_model, load_model, save_model, train_model
from segattack.scenegen import SceneConfig, generate_dataset, load_dataset, save_dataset


def _emit(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=io._json_default))


def _guarded(out_param: str | None = "out"):
    """Turn any exception into a machine-readable error record and exit code 1."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except click.ClickException:
                raise
            except Exception as e:  # noqa: BLE001 - reported, not swallowed
                record = runner.error_record(e)
                click.echo(json.dumps(record, sort_keys=True), err=True)
                out = kwargs.get(out_param) if out_param else None
                if out:
                    runner.write_error(Path(out), e)
                sys.exit(1)

        return wrapper

    return deco


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Indirect local attacks on segmentation models, and their detection."""
    repro.apply_env()


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory.")
@click.option("--n", default=240, show_default=True, help="Number of scenes.")
@click.option("--seed", default=0, show_default=True)
@click.option("--scene", "scene_file", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with SceneConfig fields.")
@click.option("--split", default="0.8,0.1,0.1", show_default=True, help="train,val,test fractions.")
@_guarded()
def gen_data(out, n, seed, scene_file, split):
    """Generate a synthetic scene dataset."""
    fields = io.read_json(scene_file) if scene_file else {}
    cfg = SceneConfig.from_dict({**fields, "seed": fields.get("seed", seed)})
    fractions = tuple(float(x) for x in split.split(","))
    ds = generate_dataset(cfg, n, fractions)
    manifest = save_dataset(ds, out)
    _emit({"manifest": str(manifest), "n": n, "splits": {k: len(v) for k, v in ds.splits.items()},
           "manifest_sha256": io.sha256_file(manifest)})


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--variant", type=click.Choice(["local", "dilated", "global_context"]),
              default="global_context", show_default=True)
@click.option("--dilations", default="1,2,4,8", show_default=True, help="Dilated variant only.")
@click.option("--epochs", default=12, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--lr", "learning_rate", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Checkpoint directory.")
@_guarded()
def train(data_dir, variant, dilations, epochs, batch_size, learning_rate, seed, out):
    """Train one model on a dataset directory."""
    ds = load_dataset(data_dir)
    h, w = ds.samples[0].labels.shape
    spec = ModelSpec(variant=variant, num_classes=ds.config.num_classes, image_size=(h, w), seed=seed,
                     dilations=tuple(int(x) for x in dilations.split(",")) if variant == "dilated" else None)
    model = build_model(spec)
    report = train_model(model, ds, TrainConfig(epochs, batch_size, learning_rate, seed))
    save_model(model, out, {"val_miou": report.val_miou})
    _emit({"checkpoint": str(Path(out)), "val_miou": report.val_miou,
           "final_loss": report.epoch_losses[-1] if report.epoch_losses else None})


def _config(config_file: str, overrides: tuple[str, ...]) -> ExperimentConfig:
    cfg = load_config(config_file)
    return apply_overrides(cfg, list(overrides)).validate()


@main.command()
@click.option("--config", "config_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override a config field, e.g. attack.step_size=0.005 (repeatable).")
@click.option("--out", type=click.Path(file_okay=False), help="Run directory (default: output_dir).")
@_guarded()
def attack(config_file, overrides, out):
    """Run one experiment setting (global, universal_patch, full_static, ...)."""
    cfg = _config(config_file, overrides)
    out = out or cfg.output_dir or "runs/run"
    record = runner.run(cfg, out)
    _emit({"run_dir": out, "aggregates": record.aggregates, "detection": record.detection})


def _model_for_run(run_dir: Path):
    if (run_dir / "model" / "manifest.json").is_file():
        return load_model(run_dir / "model")
    cfg = ExperimentConfig.from_dict(io.read_json(run_dir / "config.json"))
    if cfg.model.path:
        return load_model(cfg.model.path)
    raise FileNotFoundError(f"{run_dir}: no model checkpoint found for this run")


@main.command("detect-fit")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Attack run supplying clean/attacked image pairs.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--profile-images", default=100, show_default=True)
@click.option("--labels-source", type=click.Choice(det.LABEL_SOURCES), default="ground_truth",
              show_default=True)
@click.option("--train-fraction", default=0.8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guarded()
def detect_fit(run_dir, out, profile_images, labels_source, train_fraction, seed):
    """Fit Gaussian profiles and the pixel/image detectors on an attack run."""
    run_dir = Path(run_dir)
    model = _model_for_run(run_dir)
    cfg = ExperimentConfig.from_dict(io.read_json(run_dir / "config.json"))
    data = runner.load_or_generate_data(cfg)
    items = runner.load_items(run_dir)
    if not items:
        raise ValueError(f"{run_dir}: run has no attacked images")
    summary = runner.run_detection(model, data.subset("train")[:profile_images], items, Path(out),
                                   seed, train_fraction, labels_source)
    summary.pop("score_maps")
    _emit({"checkpoint": str(Path(out) / "checkpoint"), **summary})


@main.command("detect-eval")
@click.option("--detector", required=True, type=click.Path(exists=True, file_okay=False),
              help="Checkpoint directory written by detect-fit.")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guarded()
def detect_eval(detector, run_dir, out):
    """Score every clean/attacked pair of a run with fitted detectors."""
    run_dir, out_dir = Path(run_dir), Path(out)
    profile, pix, img = det.load_detection(detector)
    if pix is None or img is None:
        raise ValueError(f"{detector}: checkpoint lacks fitted detectors")
    model = _model_for_run(run_dir)
    items = runner.load_items(run_dir)
    if not items:
        raise ValueError(f"{run_dir}: run has no attacked images")
    out_dir.mkdir(parents=True, exist_ok=True)
    px_scores, px_labels, im_scores, im_labels = [], [], [], []
    for it in items:
        for image, fooled, is_adv in ((it.clean, np.zeros_like(it.fooled), False),
                                      (it.adversarial, it.fooled, True)):
            res = det.detect(image, model, profile, pix, img)
            px_scores.append(res.pixel_scores.ravel())
            px_labels.append(np.asarray(fooled).ravel())
            im_scores.append(res.image_score)
            im_labels.append(is_adv)
            if is_adv:
                io.save_tensor(out_dir / f"scores_{it.index:06d}.npy", res.pixel_scores)
                io.save_gray16(out_dir / f"scores_{it.index:06d}.png", res.pixel_scores, 0.0, 1.0)
    y = np.concatenate(px_labels)
    summary = {
        "pixel_auroc": det.auroc(np.concatenate(px_scores), y) if 0 < y.sum() < y.size else None,
        "image_auroc": det.auroc(im_scores, im_labels),
        "n_images": len(im_scores),
    }
    io.write_json(out_dir / "summary.json", summary)
    _emit(summary)


@main.command()
@click.option("--config", "config_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--param", required=True, help="Dotted config key to vary, e.g. adaptive.sparsity.")
@click.option("--values", required=True, help="JSON list of values, e.g. [0.75,0.85,0.9,0.95].")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guarded()
def sweep(config_file, param, values, overrides, out):
    """Run a config once per value of one parameter and tabulate the results."""
    cfg = _config(config_file, overrides)
    vals = json.loads(values)
    if not isinstance(vals, list) or not vals:
        raise ValueError("--values must be a non-empty JSON list")
    dirs = runner.sweep(cfg, param, vals, out)
    _emit({"runs": [str(d) for d in dirs], "report": str(Path(out) / "report.json")})


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--overlays", default=4, show_default=True, help="Overlay panels per run.")
@_guarded()
def report(run_dirs, out, overlays):
    """CSV tables and overlay images over one or more run directories."""
    _emit(runner.report(run_dirs, out, overlays))


if __name__ == "__main__":  # pragma: no cover
    main()
