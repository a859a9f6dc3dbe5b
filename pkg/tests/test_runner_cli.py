import json

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from segattack import io, runner
from segattack.cli import main
from segattack.config import ConfigError, ExperimentConfig, apply_overrides, load_config
from segattack.models import ModelSpec, build_model

SMALL = {
    "setting": "full_static",
    "seed": 0,
    "dataset": {"n": 24, "scene": {"width": 32, "height": 32, "object_size": [8, 14]}},
    "model": {"spec": {"variant": "global_context", "image_size": [32, 32]},
              "train": {"epochs": 3, "batch_size": 4}},
    "attack": {"step_size": 0.005, "max_iters": 5},
    "adaptive": {"iters_stage1": 5, "iters_stage2": 5, "patch_h": 4, "patch_w": 8,
                 "lambda2_stage1": 1.0},
    "universal": {"epochs": 1, "train_image_count": 4},
    "images": {"split": "train", "limit": 3},
}


def small(**over) -> ExperimentConfig:
    d = json.loads(json.dumps(SMALL))
    d.update(over)
    return ExperimentConfig.from_dict(d).validate()


# -- config ------------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = small()
    io.write_json(tmp_path / "c.json", cfg.to_dict())
    assert load_config(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("bad,match", [
    ({"setting": "universal_patch", "attack": {"mode": "targeted"}}, "untargeted"),
    ({"setting": "global", "attack": {"mode": "targeted"}}, "untargeted"),
    ({"setting": "teleport"}, "setting"),
    ({"attack": {"norm": "one"}}, "norm"),
    ({"distances": [-1]}, "distances"),
    ({"bogus": 1}, "unknown"),
])
def test_invalid_configs_rejected(bad, match):
    with pytest.raises(ConfigError, match=match):
        small(**bad)


def test_seed_mandatory():
    d = dict(SMALL)
    d.pop("seed")
    with pytest.raises(ConfigError, match="seed"):
        ExperimentConfig.from_dict(d)


def test_overrides():
    cfg = apply_overrides(small(), ["attack.step_size=0.001", "adaptive.sparsity=0.95",
                                    "images.limit=2", "output_dir=out"])
    assert cfg.attack["step_size"] == 0.001 and cfg.adaptive_config().sparsity == 0.95
    assert cfg.images.limit == 2 and cfg.output_dir == "out"
    with pytest.raises(ConfigError):
        apply_overrides(small(), ["no_equals_sign"])


# -- runs --------------------------------------------------------------------------

def _static_only_model():
    m = build_model(ModelSpec(variant="local", image_size=(32, 32)))
    with torch.no_grad():
        for p in m.net.parameters():
            p.zero_()
        m.net.logits.bias[0] = 1.0
    return m


def test_skip_rule(tmp_path):
    cfg = small()
    rec = runner.run(cfg, tmp_path, model=_static_only_model())
    assert all(r["status"] == "skipped" and r["reason"] == "no predicted dynamic pixels"
               for r in rec.per_image)
    assert rec.aggregates == {"skipped": 3}
    log = (tmp_path / "log.txt").read_text()
    assert "no predicted dynamic pixels" in log


@pytest.mark.parametrize("setting", ["full_static", "global", "adaptive_patch", "universal_patch",
                                     "distance_sweep"])
def test_run_directory_complete(tmp_path, setting):
    cfg = small(setting=setting, distances=[0, 2])
    rec = runner.run(cfg, tmp_path)
    disk = runner.load_record(tmp_path)
    assert disk["schema_version"] == io.SCHEMA_VERSION and disk["setting"] == setting
    for r in disk["per_image"]:
        for p in r.get("artifacts", {}).values():
            assert (tmp_path / p).is_file()
    ok = [r for r in rec.per_image if r["status"] == "ok"]
    assert ok
    for r in ok:
        clean = io.load_tensor(tmp_path / r["artifacts"]["clean"])
        adv = io.load_tensor(tmp_path / r["artifacts"]["adversarial"])
        support = io.load_mask(tmp_path / r["artifacts"]["support"])
        assert np.array_equal(adv[support == 0], clean[support == 0])
    assert (tmp_path / "metrics.csv").is_file() and (tmp_path / "config.json").is_file()


def test_run_reproducible(tmp_path):
    cfg = small(setting="adaptive_patch")
    a = runner.run(cfg, tmp_path / "a")
    b = runner.run(cfg, tmp_path / "b")
    assert a.aggregates == b.aggregates
    assert [r.get("metrics") for r in a.per_image] == [r.get("metrics") for r in b.per_image]


def test_detection_in_run(tmp_path):
    cfg = small(setting="global", images={"split": "train", "limit": 6},
                detection={"enabled": True, "profile_images": 6},
                attack={"mode": "untargeted", "step_size": 0.01, "max_iters": 5})
    rec = runner.run(cfg, tmp_path)
    assert rec.detection["n_images"] == 12
    assert (tmp_path / "detection/checkpoint/manifest.json").is_file()


def test_report_tables_and_corrupt_runs(tmp_path):
    dirs = []
    for S in (0.75, 0.85, 0.9, 0.95):
        d = tmp_path / f"S{S}"
        runner.run(small(setting="adaptive_patch", adaptive={**SMALL["adaptive"], "sparsity": S}), d)
        dirs.append(d)
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken/run.json").write_text("{not json")
    rec = io.read_json(dirs[0] / "run.json")
    ok = next(r for r in rec["per_image"] if r["status"] == "ok")
    (dirs[0] / ok["artifacts"]["support"]).unlink()
    summary = runner.report(dirs + [tmp_path / "broken", tmp_path / "missing"], tmp_path / "rep")
    assert summary["runs"] == 4 and len(summary["skipped_runs"]) == 2
    lines = (tmp_path / "rep/by_sparsity.csv").read_text().splitlines()
    assert lines[0] == "model,metric,sparsity=0.75,sparsity=0.85,sparsity=0.9,sparsity=0.95"
    assert (tmp_path / "rep/summary.csv").is_file()
    assert any((tmp_path / "rep/overlays").iterdir())


def test_one_run_one_row(tmp_path):
    runner.run(small(), tmp_path / "r")
    runner.report([tmp_path / "r"], tmp_path / "rep")
    assert len((tmp_path / "rep/summary.csv").read_text().splitlines()) == 2


# -- command line ----------------------------------------------------------------------

def _write_cfg(tmp_path, **over):
    d = json.loads(json.dumps(SMALL))
    d.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_cli_error_record(tmp_path):
    cfg = _write_cfg(tmp_path, setting="universal_patch", attack={"mode": "targeted"})
    res = CliRunner().invoke(main, ["attack", "--config", cfg, "--out", str(tmp_path / "run")])
    assert res.exit_code == 1
    err = json.loads((tmp_path / "run/error.json").read_text())
    assert err["error"] == "ConfigError" and "untargeted" in err["message"]
    assert not (tmp_path / "run/run.json").exists()


def test_cli_pipeline(tmp_path):
    cli = CliRunner()
    r = cli.invoke(main, ["gen-data", "--out", str(tmp_path / "data"), "--n", "12", "--seed", "1"])
    assert r.exit_code == 0, r.output
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({"width": 32, "height": 32, "object_size": [8, 14]}))
    r = cli.invoke(main, ["gen-data", "--out", str(tmp_path / "d32"), "--n", "24",
                          "--scene", str(scene)])
    assert r.exit_code == 0, r.output
    r = cli.invoke(main, ["train", "--data", str(tmp_path / "d32"), "--epochs", "2",
                          "--out", str(tmp_path / "model")])
    assert r.exit_code == 0, r.output
    cfg = _write_cfg(tmp_path, setting="global", dataset={"path": str(tmp_path / "d32")},
                     model={"path": str(tmp_path / "model")},
                     attack={"mode": "untargeted", "step_size": 0.01, "max_iters": 5},
                     images={"split": "train", "limit": 6})
    r = cli.invoke(main, ["attack", "--config", cfg, "--set", "attack.max_iters=4",
                          "--out", str(tmp_path / "run")])
    assert r.exit_code == 0, r.output
    assert io.read_json(tmp_path / "run/config.json")["attack"]["max_iters"] == 4
    r = cli.invoke(main, ["detect-fit", "--run", str(tmp_path / "run"), "--out",
                          str(tmp_path / "det"), "--profile-images", "6"])
    assert r.exit_code == 0, r.output
    r = cli.invoke(main, ["detect-eval", "--detector", str(tmp_path / "det/checkpoint"),
                          "--run", str(tmp_path / "run"), "--out", str(tmp_path / "eval")])
    assert r.exit_code == 0, r.output
    assert io.read_json(tmp_path / "eval/summary.json")["n_images"] == 12
    r = cli.invoke(main, ["sweep", "--config", cfg, "--param", "attack.step_size",
                          "--values", "[0.001, 0.01]", "--out", str(tmp_path / "sweep")])
    assert r.exit_code == 0, r.output
    assert (tmp_path / "sweep/report.json").is_file()
    r = cli.invoke(main, ["report", str(tmp_path / "run"), "--out", str(tmp_path / "rep")])
    assert r.exit_code == 0, r.output
    r = cli.invoke(main, ["detect-eval", "--detector", str(tmp_path / "nope"),
                          "--run", str(tmp_path / "run"), "--out", str(tmp_path / "e2")])
    assert r.exit_code != 0


def test_cli_sweep_bad_values(tmp_path):
    r = CliRunner().invoke(main, ["sweep", "--config", _write_cfg(tmp_path), "--param", "seed",
                                  "--values", "3", "--out", str(tmp_path / "s")])
    assert r.exit_code == 1
    assert "non-empty JSON list" in io.read_json(tmp_path / "s/error.json")["message"]
