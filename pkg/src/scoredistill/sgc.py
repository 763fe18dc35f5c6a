"""Semantic-geometry calibration losses over the four-view grid.

Each component has a ``*_grad`` form returning ``(value, d value / d grid.views)``;
the reference views are treated as constants. Every component is averaged
over the four views (for the reward on the 2x2 composite, there is a single
term). Extractors follow a small protocol: ``__call__(image)`` and
``vjp(image, cotangent)``; reward scorers expose ``score`` and ``score_grad``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .views import GRID_ORDER, MultiViewReference, ViewGrid, compose_grid, split_grid

VAR_EPS = 1e-8
LUMA = np.array([0.299, 0.587, 0.114])


class DegenerateInputError(ValueError):
    def __init__(self, message: str, view: str | None = None):
        super().__init__(message if view is None else f"{message} (view {view!r})")
        self.view = view


class SGCComponentError(RuntimeError):
    def __init__(self, component: str, cause: Exception):
        super().__init__(f"{component}: {cause}")
        self.component = component


@dataclass(frozen=True)
class SGCWeights:
    lambda_geo: float = 1.0
    lambda_sem: float = 4.0
    lambda_ir: float = 2.5

    def __post_init__(self):
        for k in ("lambda_geo", "lambda_sem", "lambda_ir"):
            v = getattr(self, k)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{k} must be finite and >= 0, got {v}")

    @property
    def all_zero(self) -> bool:
        return self.lambda_geo == self.lambda_sem == self.lambda_ir == 0.0


# -- reward-to-loss -------------------------------------------------------------

def softplus_neg(r: float) -> float:
    """Default reward-to-loss map ``softplus(-r)``: smooth and decreasing."""
    return float(np.logaddexp(0.0, -r))


def softplus_neg_grad(r: float) -> float:
    return -1.0 / (1.0 + math.exp(r))


# -- toy extractors -------------------------------------------------------------

def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA
    if image.ndim == 3 and image.shape[-1] == 1:
        return image[..., 0]
    return image


class Identity:
    def __call__(self, image):
        return np.asarray(image, dtype=np.float64)

    def vjp(self, image, cotangent):
        return np.asarray(cotangent, dtype=np.float64)


class LuminanceDepth:
    """Depth stand-in: the image luminance."""

    def __call__(self, image):
        return luminance(image)

    def vjp(self, image, cotangent):
        image = np.asarray(image)
        cot = np.asarray(cotangent, dtype=np.float64)
        if image.ndim == 3 and image.shape[-1] == 3:
            return cot[..., None] * LUMA
        if image.ndim == 3 and image.shape[-1] == 1:
            return cot[..., None]
        return cot


class GradientNormals:
    """Per-pixel unit normals ``(-k gx, -k gy, 1)/norm`` of the luminance surface.

    Forward differences over the (H-1, W-1) interior; ``strength`` k scales
    the slopes so that unit-range images give tilted normals.
    """

    def __init__(self, strength: float | None = None):
        self.strength = strength

    def _k(self, lum):
        return self.strength if self.strength is not None else float(max(lum.shape))

    def _raw(self, image):
        lum = luminance(image)
        if lum.ndim != 2 or min(lum.shape) < 2:
            raise ValueError(f"normals need an image at least 2x2, got {np.shape(image)}")
        k = self._k(lum)
        gx = lum[:-1, 1:] - lum[:-1, :-1]
        gy = lum[1:, :-1] - lum[:-1, :-1]
        v = np.stack([-k * gx, -k * gy, np.ones_like(gx)], axis=-1)
        return lum, k, v, np.linalg.norm(v, axis=-1, keepdims=True)

    def __call__(self, image):
        _, _, v, n = self._raw(image)
        return v / n

    def vjp(self, image, cotangent):
        lum, k, v, n = self._raw(image)
        u = v / n
        cot = np.asarray(cotangent, dtype=np.float64)
        dv = (cot - u * np.sum(cot * u, axis=-1, keepdims=True)) / n
        dgx, dgy = -k * dv[..., 0], -k * dv[..., 1]
        dl = np.zeros_like(lum)
        dl[:-1, 1:] += dgx
        dl[:-1, :-1] -= dgx + dgy
        dl[1:, :-1] += dgy
        return LuminanceDepth().vjp(image, dl)


def _pool(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape[:2]
    rest = image.shape[2:]
    return image.reshape((h // factor, factor, w // factor, factor) + rest).mean(axis=(1, 3))


class RandomProjectionFeatures:
    """Semantic stand-in: mean-pool by ``pool``, then a fixed Gaussian projection."""

    def __init__(self, image_shape, out_features: int = 64, pool: int = 2, seed: int = 0):
        self.image_shape = tuple(image_shape)
        h, w = self.image_shape[:2]
        if h % pool or w % pool:
            raise ValueError(f"image {h}x{w} not divisible by pool factor {pool}")
        self.pool = pool
        n_in = int(np.prod(_pool(np.zeros(self.image_shape), pool).shape))
        self.weight = np.random.default_rng(seed).standard_normal((n_in, out_features)) / math.sqrt(n_in)

    def __call__(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape:
            raise ValueError(f"feature extractor expects {self.image_shape}, got {image.shape}")
        return _pool(image, self.pool).reshape(-1) @ self.weight

    def vjp(self, image, cotangent):
        pooled_shape = _pool(np.zeros(self.image_shape), self.pool).shape
        g = (self.weight @ np.asarray(cotangent, dtype=np.float64)).reshape(pooled_shape)
        g = np.repeat(np.repeat(g, self.pool, axis=0), self.pool, axis=1)
        return g / (self.pool * self.pool)


def prompt_offset(prompt: str, scale: float = 0.1) -> float:
    """Deterministic per-prompt constant in [-scale/2, scale/2)."""
    h = int.from_bytes(hashlib.sha256(str(prompt).encode()).digest()[:4], "big")
    return scale * (h / 2 ** 32 - 0.5)


class DistanceReward:
    """Reward = minus the RMS distance to target views, plus a prompt-dependent constant.

    ``targets`` holds four views in grid order. A 2x2 composite is scored
    against the composite of the targets; a single view needs ``view``.
    """

    def __init__(self, targets, smooth: float = 1e-12):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.composite = compose_grid(self.targets)
        self.smooth = smooth

    def _target(self, image, view):
        if view is None:
            target = self.composite
        else:
            target = self.targets[GRID_ORDER.index(view) if isinstance(view, str) else int(view)]
        if image.shape != target.shape:
            raise ValueError(f"reward input {image.shape} does not match target {target.shape}")
        return target

    def score(self, image, prompt: str, view=None) -> float:
        image = np.asarray(image, dtype=np.float64)
        d = image - self._target(image, view)
        return -math.sqrt(np.mean(d * d) + self.smooth) + prompt_offset(prompt)

    def score_grad(self, image, prompt: str, view=None):
        image = np.asarray(image, dtype=np.float64)
        d = image - self._target(image, view)
        rms = math.sqrt(np.mean(d * d) + self.smooth)
        return -rms + prompt_offset(prompt), -d / (d.size * rms)


class ConstantReward:
    def __init__(self, value: float):
        self.value = float(value)

    def score(self, image, prompt, view=None) -> float:
        return self.value

    def score_grad(self, image, prompt, view=None):
        return self.value, np.zeros(np.shape(image))


# -- components -------------------------------------------------------------------

def image_reward_loss_grad(grid: ViewGrid, prompt: str, reward_model, to_loss=softplus_neg,
                           to_loss_grad=softplus_neg_grad, per_view: bool = False):
    if not per_view:
        r, dr = reward_model.score_grad(grid.composite(), prompt)
        return to_loss(r), to_loss_grad(r) * split_grid(dr)
    total, grads = 0.0, np.empty_like(grid.views)
    for i, tag in enumerate(GRID_ORDER):
        r, dr = reward_model.score_grad(grid.views[i], prompt, view=tag)
        total += to_loss(r)
        grads[i] = to_loss_grad(r) * dr
    return total / 4.0, grads / 4.0


def image_reward_loss(grid: ViewGrid, prompt: str, reward_model, to_loss=softplus_neg, per_view: bool = False) -> float:
    if not per_view:
        return to_loss(reward_model.score(grid.composite(), prompt))
    return sum(to_loss(reward_model.score(v, prompt, view=t)) for v, t in zip(grid.views, GRID_ORDER)) / 4.0


def semantic_loss_grad(grid: ViewGrid, reference: MultiViewReference, extractor):
    """Squared feature distance per view, averaged over views."""
    reference.check_compatible(grid)
    total, grads = 0.0, np.empty_like(grid.views)
    for i in range(4):
        fm = np.asarray(extractor(reference.views[i]))
        fs = np.asarray(extractor(grid.views[i]))
        if fm.shape != fs.shape:
            raise ValueError(f"feature shapes differ on view {GRID_ORDER[i]!r}: {fm.shape} vs {fs.shape}")
        d = fs - fm
        total += float(np.sum(d * d))
        grads[i] = extractor.vjp(grid.views[i], 2.0 * d)
    return total / 4.0, grads / 4.0


def semantic_loss(grid: ViewGrid, reference: MultiViewReference, extractor) -> float:
    return semantic_loss_grad(grid, reference, extractor)[0]


def pearson(a, b, view: str | None = None) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    for name, x in (("reference", a), ("rendered", b)):
        if x.var() < VAR_EPS:
            raise DegenerateInputError(f"{name} depth map is near-constant (var {x.var():.3g})", view)
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def depth_loss_grad(grid: ViewGrid, reference: MultiViewReference, depth_extractor):
    """Negative Pearson correlation of reference and rendered depth, averaged over views."""
    reference.check_compatible(grid)
    total, grads = 0.0, np.empty_like(grid.views)
    for i, tag in enumerate(GRID_ORDER):
        dm = np.asarray(depth_extractor(reference.views[i]), dtype=np.float64)
        ds = np.asarray(depth_extractor(grid.views[i]), dtype=np.float64)
        rho = pearson(dm, ds, tag)
        a = dm - dm.mean()
        b = ds - ds.mean()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        d_rho = a / (na * nb) - rho * b / (nb * nb)
        total -= rho
        grads[i] = depth_extractor.vjp(grid.views[i], -d_rho)
    return total / 4.0, grads / 4.0


def depth_loss(grid: ViewGrid, reference: MultiViewReference, depth_extractor) -> float:
    return depth_loss_grad(grid, reference, depth_extractor)[0]


def normal_loss_grad(grid: ViewGrid, reference: MultiViewReference, normal_extractor):
    """Negative cosine similarity of flattened normal fields, averaged over views."""
    reference.check_compatible(grid)
    total, grads = 0.0, np.empty_like(grid.views)
    for i, tag in enumerate(GRID_ORDER):
        nm = np.asarray(normal_extractor(reference.views[i]), dtype=np.float64).ravel()
        ns_full = np.asarray(normal_extractor(grid.views[i]), dtype=np.float64)
        ns = ns_full.ravel()
        a, b = np.linalg.norm(nm), np.linalg.norm(ns)
        if a == 0.0 or b == 0.0:
            raise DegenerateInputError("normal field has zero norm", tag)
        cos = float(nm @ ns / (a * b))
        d_cos = nm / (a * b) - cos * ns / (b * b)
        total -= cos
        grads[i] = normal_extractor.vjp(grid.views[i], -d_cos.reshape(ns_full.shape))
    return total / 4.0, grads / 4.0


def normal_loss(grid: ViewGrid, reference: MultiViewReference, normal_extractor) -> float:
    return normal_loss_grad(grid, reference, normal_extractor)[0]


# -- combination ------------------------------------------------------------------

@dataclass
class SGCExtractors:
    semantic: object
    depth: object = field(default_factory=LuminanceDepth)
    normal: object = field(default_factory=GradientNormals)
    reward: object = None
    to_loss: object = softplus_neg
    to_loss_grad: object = softplus_neg_grad
    reward_per_view: bool = False

    @classmethod
    def toy(cls, view_shape, reward_targets=None, seed: int = 0, **kw) -> "SGCExtractors":
        reward = DistanceReward(reward_targets) if reward_targets is not None else ConstantReward(0.0)
        pool = 2 if view_shape[0] % 2 == 0 and view_shape[1] % 2 == 0 else 1
        return cls(semantic=RandomProjectionFeatures(view_shape, pool=pool, seed=seed), reward=reward, **kw)


@dataclass
class SGCResult:
    total: float
    components: dict
    grad: np.ndarray | None = None


COMPONENTS = ("L_depth", "L_normal", "L_semantic", "L_IR")


def sgc_loss(grid: ViewGrid, reference: MultiViewReference, prompt: str, weights: SGCWeights,
             extractors: SGCExtractors, with_grad: bool = False) -> SGCResult:
    """``lambda_geo (L_depth + L_normal) + lambda_sem L_semantic + lambda_ir L_IR``.

    Components whose weight is zero are reported as 0 and not evaluated.
    """
    jobs = {
        "L_depth": (weights.lambda_geo, lambda: depth_loss_grad(grid, reference, extractors.depth)),
        "L_normal": (weights.lambda_geo, lambda: normal_loss_grad(grid, reference, extractors.normal)),
        "L_semantic": (weights.lambda_sem, lambda: semantic_loss_grad(grid, reference, extractors.semantic)),
        "L_IR": (weights.lambda_ir, lambda: image_reward_loss_grad(
            grid, prompt, extractors.reward, extractors.to_loss, extractors.to_loss_grad,
            extractors.reward_per_view)),
    }
    comps, total = {}, 0.0
    grad = np.zeros_like(grid.views) if with_grad else None
    for name, (w, fn) in jobs.items():
        if w == 0.0:
            comps[name] = 0.0
            continue
        try:
            value, g = fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the component name
            raise SGCComponentError(name, exc) from exc
        comps[name] = float(value)
        total += w * value
        if with_grad:
            grad += w * g
    return SGCResult(float(total), comps, grad)
