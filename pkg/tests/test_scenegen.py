import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segattack import io
from segattack.scenegen import (DatasetError, SceneConfig, SceneConfigError, _band_labels,
                                dynamic_fraction, generate_dataset, generate_scene, load_dataset,
                                render_colors, save_dataset, scene_rng, split_sizes)


def test_no_objects_gives_static_only():
    cfg = SceneConfig(objects_per_image=(0, 0), min_dynamic_fraction=0.0)
    s = generate_scene(cfg, 0)
    assert set(np.unique(s.labels)) <= set(cfg.static_ids)
    assert dynamic_fraction(s.labels, cfg) == 0.0


def test_generation_is_deterministic(small_config):
    a, b = generate_scene(small_config, 5), generate_scene(small_config, 5)
    assert a == b
    assert a.image.dtype == np.float32 and a.labels.dtype == np.uint8
    assert not np.array_equal(a.image, generate_scene(small_config, 6).image)


def test_single_square_fraction_matches_pixel_count():
    cfg = SceneConfig(objects_per_image=(1, 1), object_size=(16, 16), shapes=("rect",),
                      min_dynamic_fraction=0.0)
    for i in range(5):
        lab = generate_scene(cfg, i).labels
        brute = sum(1 for r in range(64) for c in range(64) if lab[r, c] in cfg.dynamic_ids)
        assert brute == 256
        assert dynamic_fraction(lab, cfg) == 256 / 4096 == 0.0625


def test_labels_match_painted_geometry(small_config):
    """Re-render without noise or illumination jitter: each pixel has its class's color."""
    cfg = SceneConfig(**{**small_config.to_dict(), "texture_noise_std": 0.0,
                         "illumination_jitter": 0.0})
    for i in range(10):
        s = generate_scene(cfg, i)
        bg = _band_labels(cfg, scene_rng(cfg.seed, i))
        expected = io.from_uint8(io.to_uint8(np.clip(render_colors(cfg, s.labels, bg), 0, 1)))
        assert np.array_equal(s.image, expected)
        # the background drawn from the same stream matches the labels off the objects
        static = np.isin(s.labels, cfg.static_ids)
        assert np.array_equal(s.labels[static], bg[static])


def test_solid_objects_take_class_colors(small_config):
    cfg = SceneConfig(**{**small_config.to_dict(), "texture_noise_std": 0.0,
                         "illumination_jitter": 0.0, "object_style": "solid"})
    s = generate_scene(cfg, 0)
    for k in np.unique(s.labels):
        colors = s.image[s.labels == k]
        assert np.all(colors == colors[0])


def test_dynamic_fraction_bounds(small_config):
    ds = generate_dataset(small_config, 30)
    for s in ds.samples:
        f = dynamic_fraction(s.labels, small_config)
        assert small_config.min_dynamic_fraction <= f <= small_config.max_dynamic_fraction
        assert s.labels.max() < small_config.num_classes
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_infeasible_fraction_bounds_raise():
    cfg = SceneConfig(objects_per_image=(1, 1), object_size=(2, 2), min_dynamic_fraction=0.5,
                      max_dynamic_fraction=0.6)
    with pytest.raises(SceneConfigError, match="retries"):
        generate_scene(cfg, 0)
    with pytest.raises(SceneConfigError):
        generate_dataset(cfg, 2)


@pytest.mark.parametrize("bad", [
    {"static_classes": ("sky",), "dynamic_classes": ("sky",)},
    {"min_dynamic_fraction": 0.5, "max_dynamic_fraction": 0.4},
    {"texture_noise_std": 1.5},
    {"object_size": (10, 100)},
    {"shapes": ("triangle",)},
    {"seed": -1},
])
def test_invalid_configs(bad):
    with pytest.raises(SceneConfigError):
        SceneConfig(**bad)


def test_split_sizes():
    assert split_sizes(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert split_sizes(1, (1, 0, 0)) == [1, 0, 0]
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.1))


@given(n=st.integers(1, 60), a=st.integers(0, 10), b=st.integers(0, 10), c=st.integers(1, 10))
@settings(max_examples=50, deadline=None)
def test_splits_disjoint_and_cover(n, a, b, c):
    tot = a + b + c
    sizes = split_sizes(n, (a / tot, b / tot, c / tot))
    assert sum(sizes) == n and min(sizes) >= 0


def test_dataset_splits_contiguous(small_config):
    ds = generate_dataset(small_config, 10)
    assert ds.splits == {"train": list(range(8)), "val": [8], "test": [9]}
    assert ds.samples[3] == generate_scene(small_config, 3)
    one = generate_dataset(small_config, 1, (1, 0, 0))
    assert one.splits["train"] == [0]


def test_manifest_checksum_stable(tmp_path):
    cfg = SceneConfig(seed=11)
    h1 = io.sha256_file(save_dataset(generate_dataset(cfg, 100), tmp_path / "a"))
    h2 = io.sha256_file(save_dataset(generate_dataset(cfg, 100), tmp_path / "b"))
    assert h1 == h2


def test_round_trip(tmp_path, small_config):
    ds = generate_dataset(small_config, 6)
    save_dataset(ds, tmp_path)
    assert load_dataset(tmp_path) == ds


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="missing manifest"):
        load_dataset(tmp_path)


def test_tampered_label_file(tmp_path, small_config):
    save_dataset(generate_dataset(small_config, 3), tmp_path)
    f = tmp_path / "lbl_000001.png"
    raw = bytearray(f.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(io.ChecksumError):
        load_dataset(tmp_path)


def test_label_out_of_range_rejected(tmp_path, small_config):
    save_dataset(generate_dataset(small_config, 2), tmp_path)
    lab = io.load_gray8(tmp_path / "lbl_000000.png")
    lab[0, 0] = 9
    io.save_gray8(tmp_path / "lbl_000000.png", lab)
    man = io.read_json(tmp_path / "manifest.json")
    man["files"][0]["labels_sha256"] = io.sha256_file(tmp_path / "lbl_000000.png")
    io.write_json(tmp_path / "manifest.json", man)
    with pytest.raises(DatasetError, match=">= K"):
        load_dataset(tmp_path)
