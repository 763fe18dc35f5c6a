"""Differentiable toy renderers: the identity latent-image one and an orthographic voxel one."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..kernels import voxel_backward, voxel_forward
from ..views import CameraPose, ViewGrid, canonical_poses
from .scene import SceneParameters, make_layout


class RenderError(ValueError):
    pass


class Renderer:
    """``render(theta, pose) -> image`` plus its vector-Jacobian product."""

    name = "base"
    image_shape: tuple = ()

    def layout(self) -> tuple:  # pragma: no cover
        raise NotImplementedError

    def config(self) -> dict:  # pragma: no cover
        raise NotImplementedError

    def check_pose(self, pose: CameraPose) -> None:
        pass

    def render(self, theta: np.ndarray, pose: CameraPose) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def vjp(self, theta: np.ndarray, pose: CameraPose, cotangent: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def _values(self, theta) -> np.ndarray:
        v = theta.values if isinstance(theta, SceneParameters) else np.asarray(theta, dtype=np.float64).reshape(-1)
        n = self.layout()[-1].stop
        if v.size != n:
            raise RenderError(f"{self.name} renderer expects {n} parameters, got {v.size}")
        return v

    def scene(self, values) -> SceneParameters:
        return SceneParameters(values, self.layout())


class LatentImageRenderer(Renderer):
    """theta is the image itself; the pose is ignored."""

    name = "latent_image"

    def __init__(self, image_shape):
        self.image_shape = tuple(int(s) for s in np.atleast_1d(image_shape))

    def layout(self) -> tuple:
        return make_layout(image=self.image_shape)

    def config(self) -> dict:
        return {"name": self.name, "image_shape": list(self.image_shape)}

    def render(self, theta, pose: CameraPose | None = None) -> np.ndarray:
        return self._values(theta).reshape(self.image_shape).copy()

    def vjp(self, theta, pose, cotangent) -> np.ndarray:
        self._values(theta)
        return np.asarray(cotangent, dtype=np.float64).reshape(-1).copy()


def _camera_frame(azimuth: float, elevation: float):
    az, el = math.radians(azimuth), math.radians(elevation)
    eye = np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
    right = np.array([math.cos(az), 0.0, -math.sin(az)])
    up = np.cross(eye, right)
    return eye, right, up


@lru_cache(maxsize=64)
def _ray_samples(grid: int, size: int, n_samples: int, half_width: float, azimuth: float, elevation: float):
    """Trilinear corner indices/weights of every ray sample for one pose."""
    eye, right, up = _camera_frame(azimuth, elevation)
    reach = math.sqrt(3.0)
    delta = 2.0 * reach / n_samples
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    u = coords[None, :]
    v = -coords[:, None]
    origin = half_width * (u[..., None] * right + v[..., None] * up) + reach * eye     # (H, W, 3)
    z = (np.arange(n_samples) + 0.5) * delta
    pts = origin.reshape(-1, 1, 3) - z[None, :, None] * eye                            # (R, S, 3)
    valid = np.all(np.abs(pts) <= 1.0, axis=-1)
    g = np.clip((pts + 1.0) * (grid / 2.0) - 0.5, 0.0, grid - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), grid - 2)
    f = g - i0
    idx = np.empty(pts.shape[:2] + (8,), dtype=np.int64)
    wts = np.empty(pts.shape[:2] + (8,))
    k = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx[..., k] = ((i0[..., 0] + dx) * grid + (i0[..., 1] + dy)) * grid + (i0[..., 2] + dz)
                wts[..., k] = ((f[..., 0] if dx else 1.0 - f[..., 0])
                               * (f[..., 1] if dy else 1.0 - f[..., 1])
                               * (f[..., 2] if dz else 1.0 - f[..., 2]))
                k += 1
    wts *= valid[..., None]
    for a in (idx, wts, valid, z):
        a.setflags(write=False)
    return idx, wts, valid, z, delta, 2.0 * reach


class VoxelRenderer(Renderer):
    """Orthographic emission-absorption rendering of a density/colour voxel grid.

    The volume is the cube [-1, 1]^3 (y up). Per voxel: a density logit
    (density = ``density_scale * softplus``) and three colour logits
    (colour = sigmoid), both trilinearly interpolated. Cameras orbit the
    origin; azimuth 0 looks down -z. Background is white.
    """

    name = "voxel"
    MAX_GRID = 32
    MAX_IMAGE = 64

    def __init__(self, grid: int = 16, image_size: int = 16, n_samples: int | None = None,
                 half_width: float = 1.25, density_scale: float = 10.0, background=(1.0, 1.0, 1.0)):
        if not 2 <= grid <= self.MAX_GRID:
            raise ValueError(f"voxel grid must be in [2, {self.MAX_GRID}], got {grid}")
        if not 1 <= image_size <= self.MAX_IMAGE:
            raise ValueError(f"image size must be in [1, {self.MAX_IMAGE}], got {image_size}")
        self.grid = int(grid)
        self.image_size = int(image_size)
        self.n_samples = int(n_samples or 2 * grid)
        self.half_width = float(half_width)
        self.density_scale = float(density_scale)
        self.background = np.asarray(background, dtype=np.float64)
        self.image_shape = (self.image_size, self.image_size, 3)

    def layout(self) -> tuple:
        g = self.grid
        return make_layout(density=(g, g, g), color=(g, g, g, 3))

    def config(self) -> dict:
        return {"name": self.name, "grid": self.grid, "image_size": self.image_size,
                "n_samples": self.n_samples, "half_width": self.half_width,
                "density_scale": self.density_scale, "background": self.background.tolist()}

    def check_pose(self, pose: CameraPose) -> None:
        if not isinstance(pose, CameraPose):
            raise RenderError(f"voxel renderer needs a CameraPose, got {type(pose).__name__}")
        if not -89.0 <= pose.elevation <= 89.0:
            raise RenderError(f"elevation {pose.elevation} outside [-89, 89]")

    def _rays(self, pose: CameraPose):
        self.check_pose(pose)
        return _ray_samples(self.grid, self.image_size, self.n_samples, self.half_width, *pose.key())

    def _split(self, theta):
        v = self._values(theta)
        n = self.grid ** 3
        return v[:n], v[n:].reshape(n, 3)

    def render_with_depth(self, theta, pose: CameraPose):
        idx, wts, valid, z, delta, far = self._rays(pose)
        dens, col = self._split(theta)
        img, depth = voxel_forward(idx, wts, valid, dens, col, self.density_scale, delta, self.background, z, far)
        s = self.image_size
        return img.reshape(s, s, 3), depth.reshape(s, s)

    def render(self, theta, pose: CameraPose) -> np.ndarray:
        return self.render_with_depth(theta, pose)[0]

    def depth(self, theta, pose: CameraPose) -> np.ndarray:
        """Expected ray-termination distance from the image plane (background at the far plane)."""
        return self.render_with_depth(theta, pose)[1]

    def vjp(self, theta, pose: CameraPose, cotangent) -> np.ndarray:
        idx, wts, valid, _, delta, _ = self._rays(pose)
        dens, col = self._split(theta)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != self.image_shape:
            raise RenderError(f"cotangent shape {cot.shape} != image shape {self.image_shape}")
        g_dens, g_col = voxel_backward(idx, wts, valid, dens, col, self.density_scale, delta,
                                       self.background, cot.reshape(-1, 3))
        return np.concatenate([g_dens, g_col.reshape(-1)])

    # -- scene construction helpers ------------------------------------------
    def empty_scene(self) -> SceneParameters:
        n = self.grid ** 3
        return self.scene(np.concatenate([np.full(n, -40.0), np.zeros(3 * n)]))

    def random_scene(self, rng, density_mean: float = -3.0, scale: float = 0.5) -> SceneParameters:
        n = self.grid ** 3
        return self.scene(np.concatenate([density_mean + scale * rng.standard_normal(n),
                                          scale * rng.standard_normal(3 * n)]))

    def centers(self) -> np.ndarray:
        c = (np.arange(self.grid) + 0.5) / self.grid * 2.0 - 1.0
        return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def make_renderer(config: dict) -> Renderer:
    cfg = dict(config)
    name = cfg.pop("name")
    if name == LatentImageRenderer.name:
        return LatentImageRenderer(tuple(cfg["image_shape"]))
    if name == VoxelRenderer.name:
        return VoxelRenderer(**cfg)
    raise ValueError(f"unknown renderer {name!r}")


def render(theta, pose: CameraPose, renderer: Renderer) -> np.ndarray:
    renderer.check_pose(pose)
    return renderer.render(theta, pose)


def render_grid(theta, renderer: Renderer, elevation: float = 0.0) -> ViewGrid:
    cams = canonical_poses(elevation)
    return ViewGrid(np.stack([render(theta, c, renderer) for c in cams]), cams)


def grid_vjp(theta, renderer: Renderer, cotangent, cameras=None) -> np.ndarray:
    """Sum of per-view VJPs for a ``(4, ...)`` cotangent over the grid cameras."""
    cams = cameras or canonical_poses()
    return sum(renderer.vjp(theta, c, g) for c, g in zip(cams, np.asarray(cotangent)))
