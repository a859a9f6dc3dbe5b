import functools
import os

import numpy as np
import pytest

os.environ.setdefault("SEGATTACK_DETERMINISTIC", "1")

from segattack import repro  # noqa: E402
from segattack.models import ModelSpec, TrainConfig, build_model, train_model  # noqa: E402
from segattack.scenegen import SceneConfig, generate_dataset  # noqa: E402

repro.apply_env()


@functools.lru_cache(maxsize=None)
def scene_data(seed: int, n: int = 240):
    return generate_dataset(SceneConfig(seed=seed), n)


@functools.lru_cache(maxsize=None)
def trained_model(variant: str, seed: int, epochs: int = 15):
    """Models trained once per session and shared by every test that needs one."""
    data = scene_data(seed)
    spec = ModelSpec(variant=variant, num_classes=data.config.num_classes, seed=seed,
                     dilations=(1, 2, 4, 8) if variant == "dilated" else None)
    model = build_model(spec)
    train_model(model, data, TrainConfig(epochs=epochs, batch_size=8, seed=seed))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    return SceneConfig(width=32, height=32, object_size=(6, 12), seed=7)


@pytest.fixture(scope="session")
def local_untrained():
    return build_model(ModelSpec(variant="local", seed=3, image_size=(32, 32)))


@pytest.fixture(scope="session")
def global_untrained():
    return build_model(ModelSpec(variant="global_context", seed=3, image_size=(32, 32)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
