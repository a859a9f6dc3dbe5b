import numpy as np
import pytest
import torch

from segattack.models import (ModelSpec, ModelSpecError, TrainConfig, TrainingDivergedError,
                              build_model, extract_features, input_gradient, load_model, predict,
                              receptive_field_radius, save_model, train_model)
from segattack.scenegen import generate_dataset
from segattack import io


def _image(rng, h=32, w=32):
    return rng.random((h, w, 3)).astype(np.float32)


def test_logit_shape_and_softmax(local_untrained, rng):
    logits, probs, labels = predict(local_untrained, _image(rng))
    assert logits.shape == probs.shape == (32, 32, 5)
    assert np.abs(probs.sum(-1) - 1).max() < 1e-6
    assert np.array_equal(labels, probs.argmax(-1))


def test_argmax_tie_breaks_to_lowest_index():
    logits = np.array([2.0, 2.0, 1.0])
    assert int(np.argmax(logits)) == 0
    spec = ModelSpec(variant="local", num_classes=3, image_size=(4, 4))
    m = build_model(spec)
    with torch.no_grad():
        for p in m.net.parameters():
            p.zero_()
        m.net.logits.bias.copy_(torch.tensor([2.0, 2.0, 1.0]))
    assert np.all(predict(m, np.zeros((4, 4, 3), np.float32))[2] == 0)


def test_deterministic_init():
    spec = ModelSpec(variant="dilated", dilations=(1, 2, 4, 8), seed=5)
    a, b = build_model(spec).parameters(), build_model(spec).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_spec_validation():
    with pytest.raises(ModelSpecError):
        ModelSpec(variant="dilated")
    with pytest.raises(ModelSpecError):
        ModelSpec(variant="local", dilations=(1, 2, 1, 1))
    with pytest.raises(ModelSpecError):
        ModelSpec(variant="transformer")


def test_receptive_field_radius():
    assert receptive_field_radius(ModelSpec(variant="local")) == 4
    assert receptive_field_radius(ModelSpec(variant="dilated", dilations=(1, 2, 4, 8))) == 15
    assert receptive_field_radius(ModelSpec(variant="global_context")) == "unbounded"


@pytest.mark.parametrize("variant", ["local", "dilated", "global_context"])
def test_feature_taps(variant, rng):
    spec = ModelSpec(variant=variant, image_size=(32, 32),
                     dilations=(1, 2, 4, 8) if variant == "dilated" else None)
    m = build_model(spec)
    img = _image(rng)
    fs = extract_features(m, img)
    expected = {"local": 5, "dilated": 5, "global_context": 6}[variant]
    assert len(fs) == expected == len(spec.tap_names())
    assert ("context_merge" in fs.names) == (variant == "global_context")
    # every tap keeps the full resolution; channels follow the spec table
    for (name, f), ch in zip(fs, spec.tap_channels()):
        assert f.shape == (32, 32, ch)
    again = extract_features(m, img)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(fs, again))


def test_shape_mismatch(local_untrained):
    with pytest.raises(ValueError, match="shape"):
        predict(local_untrained, np.zeros((16, 16, 3), np.float32))


def test_constant_loss_zero_gradient(local_untrained, rng):
    g = input_gradient(local_untrained, _image(rng), lambda lg: torch.tensor(3.0))
    assert np.all(g == 0)


def test_non_scalar_loss_rejected(local_untrained, rng):
    with pytest.raises(TypeError):
        input_gradient(local_untrained, _image(rng), lambda lg: lg.sum(-1))


def test_gradient_matches_finite_differences(rng):
    m = build_model(ModelSpec(variant="global_context", seed=1, image_size=(16, 16))).to(torch.float64)
    img = rng.random((16, 16, 3))
    w = torch.as_tensor(rng.standard_normal((16, 16, 5)))
    f = lambda lg: (torch.tanh(lg) * w).sum()  # noqa: E731
    g = input_gradient(m, img, f)
    h = 1e-6
    for _ in range(20):
        i, j, c = rng.integers(16), rng.integers(16), rng.integers(3)
        up, dn = img.copy(), img.copy()
        up[i, j, c] += h
        dn[i, j, c] -= h
        with torch.no_grad():
            fd = (float(f(m.logits_tensor(torch.as_tensor(up))))
                  - float(f(m.logits_tensor(torch.as_tensor(dn))))) / (2 * h)
        assert abs(fd - g[i, j, c]) <= 1e-3 * max(abs(fd), 1e-6) + 1e-9


@pytest.mark.parametrize("variant,dil", [("local", None), ("dilated", (1, 2, 4, 8))])
def test_receptive_field_support(variant, dil, rng):
    spec = ModelSpec(variant=variant, dilations=dil, seed=2, image_size=(48, 48))
    m = build_model(spec)
    R = receptive_field_radius(spec)
    img = _image(rng, 48, 48)
    for (r, c) in [(24, 24), (0, 0), (40, 10)]:
        g = input_gradient(m, img, lambda lg: lg[r, c, 1])
        rows, cols = np.nonzero(np.abs(g).sum(-1))
        cheb = np.maximum(np.abs(rows - r), np.abs(cols - c))
        assert cheb.max() <= R
        yy, xx = np.mgrid[:48, :48]
        outside = np.maximum(np.abs(yy - r), np.abs(xx - c)) > R
        assert np.all(g[outside] == 0)


def test_global_context_sees_everything(global_untrained, rng):
    g = input_gradient(global_untrained, _image(rng), lambda lg: lg[0, 0].sum())
    assert np.abs(g[31, 31]).sum() > 0


def test_shift_equivariance_local(rng):
    m = build_model(ModelSpec(variant="local", seed=4, image_size=(32, 32)))
    big = _image(rng, 40, 40)
    s = 3
    a, b = big[:32, :32], big[s:s + 32, s:s + 32]
    la, lb = predict(m, a)[0], predict(m, b)[0]
    R = 4
    # interior pixels whose receptive fields avoid both borders
    assert np.abs(la[s + R:32 - R, s + R:32 - R] - lb[R:32 - R - s, R:32 - R - s]).max() < 1e-5


def test_training_reduces_loss_and_reports(small_config):
    ds = generate_dataset(small_config, 20)
    m = build_model(ModelSpec(variant="local", image_size=(32, 32), seed=0))
    rep = train_model(m, ds, TrainConfig(epochs=4, batch_size=4, seed=0))
    assert len(rep.epoch_losses) == 4
    assert rep.epoch_losses[-1] < rep.epoch_losses[0]
    assert 0 <= rep.val_miou <= 1


def test_zero_epochs_leaves_parameters(small_config):
    ds = generate_dataset(small_config, 4)
    m = build_model(ModelSpec(variant="local", image_size=(32, 32), seed=0))
    before = m.parameters()
    train_model(m, ds, TrainConfig(epochs=0))
    after = m.parameters()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_overfits_single_sample(small_config):
    ds = generate_dataset(small_config, 1, (1, 0, 0))
    m = build_model(ModelSpec(variant="local", image_size=(32, 32), seed=0))
    rep = train_model(m, ds, TrainConfig(epochs=300, batch_size=1, learning_rate=1e-2, seed=0))
    assert rep.train_pixel_accuracy >= 0.99


def test_training_deterministic(small_config):
    ds = generate_dataset(small_config, 12)
    reps = []
    for _ in range(2):
        m = build_model(ModelSpec(variant="global_context", image_size=(32, 32), seed=1))
        reps.append(train_model(m, ds, TrainConfig(epochs=2, batch_size=4, seed=1)).to_dict())
    assert reps[0] == reps[1]


def test_divergence_aborts(small_config):
    ds = generate_dataset(small_config, 4)
    m = build_model(ModelSpec(variant="local", image_size=(32, 32), seed=0))
    with torch.no_grad():
        m.net.logits.weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train_model(m, ds, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path, global_untrained, rng):
    save_model(global_untrained, tmp_path, {"note": 1})
    m = load_model(tmp_path)
    img = _image(rng)
    assert np.array_equal(predict(m, img)[0], predict(global_untrained, img)[0])
    (tmp_path / "params.npz").write_bytes(b"garbage")
    with pytest.raises(io.ChecksumError):
        load_model(tmp_path)
