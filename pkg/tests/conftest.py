import hashlib
from pathlib import Path

import numpy as np
import pytest

import scoredistill
from scoredistill.backends.toy import ToyArchitecture, ToyDenoiser
from scoredistill.backends.training import MixtureDataset, TrainConfig, VoxelViewDataset, train_toy_denoiser
from scoredistill.oracles import MixtureDenoiser, four_mode_mixture
from scoredistill.schedule import make_schedule

PKG = Path(scoredistill.__file__).parent

# trained weights are cached across sessions, keyed on the code that produces them
TOY_2D_STEPS = 4000
TOY_3D_STEPS = 3000


def _code_key(*extra) -> str:
    h = hashlib.sha256()
    for name in ("backends/toy.py", "backends/training.py", "optim.py", "schedule.py", "kernels.py",
                 "render/renderers.py", "render/fixtures.py", "conditioning.py"):
        h.update((PKG / name).read_bytes())
    h.update(repr(extra).encode())
    return h.hexdigest()[:12]


def _cached_model(request, name, build):
    cache_dir = Path(request.config.cache.mkdir("scoredistill-models"))
    path = cache_dir / f"{name}-{_code_key(name)}.npz"
    for stale in cache_dir.glob(f"{name}-*.npz"):
        if stale != path:
            stale.unlink()
    if path.exists():
        try:
            return ToyDenoiser.load(path)
        except (ValueError, OSError, KeyError):
            path.unlink()
    model = build()
    model.save(path)
    return model


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(1000)


@pytest.fixture(scope="session")
def mixture():
    return four_mode_mixture()


@pytest.fixture(scope="session")
def oracle(mixture, schedule):
    return MixtureDenoiser(mixture, schedule)


@pytest.fixture(scope="session")
def small_toy():
    """Untrained but randomly initialized toy network with every hook active."""
    arch = ToyArchitecture(latent_shape=(2,), hidden=16, n_tokens=4, mlp_hidden=16, n_blocks=1, time_features=8,
                           n_classes=4, visual_tokens=4)
    model = ToyDenoiser(arch, make_schedule(100), seed=3)
    rng = np.random.default_rng(7)
    # fresh init zeroes the input skip; give it weight so every path is exercised
    model.params["Wsk"] = 0.3 * rng.standard_normal(model.params["Wsk"].shape)
    model.params["bsk"] = 0.3 * rng.standard_normal(model.params["bsk"].shape)
    return model


@pytest.fixture(scope="session")
def trained_2d(request, mixture, schedule):
    def build():
        return train_toy_denoiser(MixtureDataset(mixture), schedule, TrainConfig(steps=TOY_2D_STEPS), seed=0)

    return _cached_model(request, f"toy2d-{TOY_2D_STEPS}", build)


@pytest.fixture(scope="session")
def trained_3d(request, schedule):
    def build():
        return train_toy_denoiser(VoxelViewDataset(), schedule, TrainConfig(steps=TOY_3D_STEPS), seed=0,
                                  pixel_range=(0.0, 1.0))

    return _cached_model(request, f"toy3d-{TOY_3D_STEPS}", build)


@pytest.fixture(scope="session")
def trained_2d_path(request, trained_2d):
    path = Path(request.config.cache.mkdir("scoredistill-models")) / "toy2d-current.npz"
    trained_2d.save(path)
    return path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
