"""Procedural voxel scenes built from soft coloured balls."""

from __future__ import annotations

import numpy as np

from .renderers import VoxelRenderer
from .scene import SceneParameters

# (centre, radius, rgb); deliberately lopsided so front and back views differ
ASYMMETRIC_BALLS = (
    ((0.0, -0.15, 0.3), 0.45, (0.85, 0.2, 0.15)),
    ((0.4, 0.35, -0.25), 0.3, (0.15, 0.7, 0.2)),
    ((-0.45, 0.2, -0.35), 0.25, (0.2, 0.3, 0.85)),
)
SINGLE_BALL = (((0.0, 0.0, 0.0), 0.55, (0.9, 0.8, 0.1)),)
SCENES = {"asymmetric": ASYMMETRIC_BALLS, "single_ball": SINGLE_BALL}


def _logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-4, 1 - 1e-4)
    return np.log(p / (1.0 - p))


def ball_scene(renderer: VoxelRenderer, balls=ASYMMETRIC_BALLS, inside: float = 2.0, outside: float = -6.0,
               softness: float = 0.08) -> SceneParameters:
    """Density logits ramp from ``outside`` to ``inside`` across each ball surface."""
    pts = renderer.centers().reshape(-1, 3)
    occ = np.zeros(len(pts))
    color = np.full((len(pts), 3), 0.5)
    for centre, radius, rgb in balls:
        sd = np.linalg.norm(pts - np.asarray(centre), axis=1) - radius
        w = 1.0 / (1.0 + np.exp(sd / softness))
        color = np.where((w > occ)[:, None], np.asarray(rgb), color)
        occ = np.maximum(occ, w)
    dens = outside + (inside - outside) * occ
    return renderer.scene(np.concatenate([dens, _logit(color).reshape(-1)]))


def named_scene(renderer: VoxelRenderer, name: str) -> SceneParameters:
    if name not in SCENES:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENES)}")
    return ball_scene(renderer, SCENES[name])
