"""Datasets and the epsilon-prediction training loop for the toy backend."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..conditioning import TokenProjector, ToyImageEncoder
from ..optim import Adam, cosine_lr
from ..schedule import DiffusionSchedule
from .toy import ToyArchitecture, ToyDenoiser, backward, forward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became {loss} at step {step}")
        self.step = step


class TrainingThresholdError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 2e-3
    cond_dropout: float = 0.1
    visual_prob: float = 0.5
    visual_tau: float = 1.0
    eval_samples: int = 4096
    mse_threshold: float | None = None
    hidden: int = 128
    mlp_hidden: int = 128
    n_blocks: int = 2
    n_tokens: int = 4
    log_every: int = 0


class MixtureDataset:
    """Samples of a Gaussian mixture labelled by class.

    ``class_modes[i]`` lists the mode indices that make up class ``i + 1``.
    The visual prompt of a class is its mean location pushed through a fixed
    encoder/projector pair.
    """

    def __init__(self, mixture, class_modes=None, class_names=None, token_dim: int = 32, visual_tokens: int = 4):
        self.mixture = mixture
        self.class_modes = [list(c) for c in (class_modes or [[i] for i in range(len(mixture.modes))])]
        self.class_names = tuple(class_names or (f"class{i + 1}" for i in range(len(self.class_modes))))
        self.latent_shape = (mixture.dim,)
        self._subsets = [mixture.subset(c) for c in self.class_modes]
        self.encoder = ToyImageEncoder(mixture.dim, out_features=16, seed=11)
        self.projector = TokenProjector(16, n_tokens=visual_tokens, token_dim=token_dim, seed=12)
        self._tokens = np.stack([self.projector(self.encoder(self.reference_image(i + 1)))
                                 for i in range(self.n_classes)])

    @property
    def n_classes(self) -> int:
        return len(self.class_modes)

    def reference_image(self, label: int) -> np.ndarray:
        sub = self._subsets[label - 1]
        return (sub.weights[:, None] * sub.modes).sum(0)

    def sample(self, rng, n: int):
        labels = rng.integers(1, self.n_classes + 1, size=n)
        x = np.empty((n, self.mixture.dim))
        for c in range(1, self.n_classes + 1):
            sel = labels == c
            if sel.any():
                x[sel], _ = self._subsets[c - 1].sample(rng, int(sel.sum()))
        return x, labels

    def describe(self) -> dict:
        return {"kind": "mixture", "modes": self.mixture.modes.tolist(), "sigma": self.mixture.sigma,
                "weights": self.mixture.weights.tolist(), "class_modes": self.class_modes,
                "class_names": list(self.class_names)}

    def visual_tokens(self, labels, rng=None) -> np.ndarray:
        return self._tokens[np.asarray(labels) - 1]


class VoxelViewDataset:
    """Renders of named voxel scenes from random azimuths; one class per scene.

    Images come from a precomputed bank of ``bank_size`` evenly spaced
    azimuths at fixed ``elevation``. The visual prompt of a class is its front
    view pushed through a fixed encoder/projector pair.
    """

    def __init__(self, scenes=("asymmetric", "single_ball"), grid: int = 16, image_size: int = 16,
                 elevation: float = 15.0, bank_size: int = 360, token_dim: int = 32, visual_tokens: int = 4):
        from ..render import VoxelRenderer
        from ..render.fixtures import named_scene
        from ..views import CameraPose

        self.scenes = tuple(scenes)
        self.class_names = self.scenes
        self.grid, self.image_size, self.elevation, self.bank_size = grid, image_size, float(elevation), bank_size
        self.renderer = VoxelRenderer(grid=grid, image_size=image_size)
        self.latent_shape = self.renderer.image_shape
        self.params = [named_scene(self.renderer, s) for s in self.scenes]
        az = np.arange(bank_size) * (360.0 / bank_size)
        self.bank = np.stack([np.stack([self.renderer.render(th, CameraPose(a, self.elevation)) for a in az])
                              for th in self.params])
        self._front = self.bank[:, 0]
        self.encoder = ToyImageEncoder(4 * 3, out_features=16, seed=11, center=True)
        self.projector = TokenProjector(16, n_tokens=visual_tokens, token_dim=token_dim, seed=12)
        self._tokens = np.stack([self.projector(self.encoder(f)) for f in self._front])

    @property
    def n_classes(self) -> int:
        return len(self.scenes)

    def reference_image(self, label: int) -> np.ndarray:
        return self._front[label - 1]

    def sample(self, rng, n: int):
        labels = rng.integers(1, self.n_classes + 1, size=n)
        views = rng.integers(0, self.bank_size, size=n)
        return self.bank[labels - 1, views], labels

    def describe(self) -> dict:
        return {"kind": "voxel_views", "scenes": list(self.scenes), "grid": self.grid,
                "image_size": self.image_size, "elevation": self.elevation, "bank_size": self.bank_size}

    def visual_tokens(self, labels, rng=None) -> np.ndarray:
        return self._tokens[np.asarray(labels) - 1]


def dataset_from_description(desc: dict, token_dim: int = 32, visual_tokens: int = 4):
    """Rebuild the dataset a toy model was trained on from its metadata record."""
    desc = dict(desc)
    kind = desc.pop("kind", None)
    if kind == "mixture":
        from ..oracles import MixtureSpec

        mix = MixtureSpec(np.asarray(desc["modes"]), desc["sigma"], np.asarray(desc["weights"]))
        return MixtureDataset(mix, desc.get("class_modes"), desc.get("class_names"),
                              token_dim=token_dim, visual_tokens=visual_tokens)
    if kind == "voxel_views":
        return VoxelViewDataset(token_dim=token_dim, visual_tokens=visual_tokens, **desc)
    raise ValueError(f"unknown dataset kind {kind!r}")


def heldout_mse(model: ToyDenoiser, dataset, n: int, rng) -> float:
    sched = model.schedule
    x0, labels = dataset.sample(rng, n)
    x0 = model.encode(x0).reshape(n, -1)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bar[t - 1][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    pred = forward(model.params, model.arch, xt, t.astype(np.float64), labels)
    return float(np.mean((pred - eps) ** 2))


def train_toy_denoiser(dataset, schedule: DiffusionSchedule, config: TrainConfig = TrainConfig(),
                       seed: int = 0, pixel_range=None) -> ToyDenoiser:
    """Standard epsilon-prediction training with condition dropout.

    Reproducible for a fixed seed. Raises :class:`TrainingDivergedError` with
    the step index on a non-finite loss, and :class:`TrainingThresholdError`
    when ``config.mse_threshold`` is set and the held-out MSE misses it.
    """
    arch = ToyArchitecture(latent_shape=dataset.latent_shape, hidden=config.hidden, n_tokens=config.n_tokens,
                           mlp_hidden=config.mlp_hidden, n_blocks=config.n_blocks,
                           n_classes=dataset.n_classes, class_names=dataset.class_names)
    proj = getattr(dataset, "projector", None)
    if proj is not None and (proj.n_tokens, proj.token_dim) != (arch.visual_tokens, arch.token_dim):
        raise ValueError(f"dataset visual tokens ({proj.n_tokens}, {proj.token_dim}) do not match the network "
                         f"({arch.visual_tokens}, {arch.token_dim}); build the dataset with token_dim={arch.token_dim}")
    ss = np.random.SeedSequence(seed)
    init_seed, data_seed, eval_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    model = ToyDenoiser(arch, schedule, seed=init_seed, pixel_range=pixel_range)
    rng = np.random.default_rng(data_seed)
    opt = Adam(config.lr)
    B = config.batch_size
    T = schedule.T
    has_visual = hasattr(dataset, "visual_tokens") and config.visual_prob > 0
    for step in range(config.steps):
        x0, labels = dataset.sample(rng, B)
        x0 = model.encode(x0).reshape(B, -1)
        t = rng.integers(1, T + 1, size=B)
        eps = rng.standard_normal(x0.shape)
        ab = schedule.alpha_bar[t - 1][:, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        drop = rng.random(B) < config.cond_dropout
        ids = np.where(drop, 0, labels)
        vis = tau = None
        if has_visual:
            tokens = dataset.visual_tokens(labels, rng)
            use = (rng.random(B) < config.visual_prob) & ~drop
            vis = tokens * use[:, None, None]
            tau = config.visual_tau
        pred, cache = forward(model.params, arch, xt, t.astype(np.float64), ids, vis, tau, keep=True)
        diff = pred - eps
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        grads = backward(model.params, arch, cache, diff * (2.0 / diff.size))
        opt.step(model.params, grads, cosine_lr(config.lr, step, config.steps))
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    mse = heldout_mse(model, dataset, config.eval_samples, np.random.default_rng(eval_seed))
    model.metadata.update(train=asdict(config), seed=seed, heldout_mse=mse)
    if hasattr(dataset, "describe"):
        model.metadata["dataset"] = dataset.describe()
    if config.mse_threshold is not None and not mse < config.mse_threshold:
        raise TrainingThresholdError(f"held-out eps-MSE {mse:.4f} >= threshold {config.mse_threshold}")
    return model
