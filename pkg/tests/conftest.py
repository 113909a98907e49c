import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deformproto import model as M
from deformproto.config import RunConfig
from deformproto.data import gen_data, load_split, read_manifest

settings.register_profile(
    "repo", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**kw):
    """32x32 images, latent 8x8, a couple of epochs: fast enough for unit tests."""
    base = dict(
        image_size=32, backbone_channels=(8, 8, 8), backbone_strides=(2, 2, 1),
        offset_hidden=8, warmup1_epochs=1, warmup2_epochs=1, joint_epochs=2,
        projection_epochs=(4,), last_layer_epochs=2, batch_size=6,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    gen_data(root, num_classes=3, per_class=6, image_size=32, pose_jitter=4.0, seed=0,
             test_per_class=3)
    return root


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    return read_manifest(toy_root / "manifest.csv")


@pytest.fixture(scope="session")
def toy_train(toy_manifest):
    cfg = small_config()
    return load_split(toy_manifest, "train", cfg.pixel_mean, cfg.pixel_std, cfg.image_size,
                      keep_rgb=True)


@pytest.fixture(scope="session")
def trained_toy(toy_train):
    """A small model taken through every stage once (shared, do not mutate)."""
    model = M.init_model(small_config())
    model, history = M.run_training(model, toy_train)
    return model, history


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
