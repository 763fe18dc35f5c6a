"""Condition sets, visual-prompt embedding and decoupled attention fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .guidance import softmax

VISUAL_SOURCES = ("self_guidance", "reference")


@dataclass(frozen=True, eq=False)
class ConditionSet:
    """What a denoiser query carries.

    ``text`` is a class/prompt id for the toy backends (or an embedding array
    for external ones); ``None`` is the null condition. ``visual`` is a token
    sequence or ``None`` (the null visual condition, equivalent to all zeros).
    """

    text: object = None
    visual: Optional[np.ndarray] = None
    tau: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau >= 0.0):
            raise ValueError(f"tau must be finite and >= 0, got {self.tau}")
        if self.visual is not None:
            v = np.asarray(self.visual, dtype=np.float64)
            if v.ndim != 2:
                raise ValueError(f"visual tokens must be (n_tokens, dim), got {v.shape}")
            object.__setattr__(self, "visual", v)

    @classmethod
    def null(cls, tau: float = 0.5) -> "ConditionSet":
        return cls(None, None, tau)

    @property
    def has_text(self) -> bool:
        return self.text is not None

    @property
    def has_visual(self) -> bool:
        return self.visual is not None and bool(np.any(self.visual))

    def without_visual(self) -> "ConditionSet":
        return ConditionSet(self.text, None, self.tau)

    def without_text(self) -> "ConditionSet":
        return ConditionSet(None, self.visual, self.tau)


@dataclass(frozen=True, eq=False)
class VisualPrompt:
    source: str
    image: np.ndarray
    embedding: np.ndarray

    def __post_init__(self):
        if self.source not in VISUAL_SOURCES:
            raise ValueError(f"visual prompt source must be one of {VISUAL_SOURCES}")

    def conditions(self, text, tau: float = 0.5) -> ConditionSet:
        return ConditionSet(text, self.embedding, tau)


def _pool(image: np.ndarray, cells: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 1:
        return image
    if image.ndim == 2:
        image = image[..., None]
    if image.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {image.shape}")
    h, w, _ = image.shape
    if h % cells or w % cells:
        raise ValueError(f"image {h}x{w} not divisible into {cells}x{cells} cells")
    return image.reshape(cells, h // cells, cells, w // cells, -1).mean(axis=(1, 3)).ravel()


class ToyImageEncoder:
    """Mean-pool over a ``cells x cells`` grid, then a fixed linear map (no bias).

    With ``center`` the pooled features have their mean removed first, so a
    shared background does not dominate the embedding. Still linear.
    """

    def __init__(self, in_features: int, out_features: int = 32, cells: int = 2, seed: int = 0,
                 center: bool = False):
        rng = np.random.default_rng(seed)
        self.cells = cells
        self.center = center
        self.in_features = in_features
        self.weight = rng.standard_normal((in_features, out_features)) / math.sqrt(in_features)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        feats = _pool(image, self.cells)
        if feats.size != self.in_features:
            raise ValueError(f"encoder expects {self.in_features} pooled features, got {feats.size}")
        if self.center:
            feats = feats - feats.mean()
        return feats @ self.weight


class TokenProjector:
    """Bias-free two-layer map from a feature vector to ``n_tokens`` tokens."""

    def __init__(self, in_features: int, n_tokens: int = 4, token_dim: int = 32, seed: int = 1):
        rng = np.random.default_rng(seed)
        self.in_features = in_features
        self.n_tokens = n_tokens
        self.token_dim = token_dim
        hidden = n_tokens * token_dim
        self.w1 = rng.standard_normal((in_features, hidden)) / math.sqrt(in_features)
        self.w2 = rng.standard_normal((hidden, hidden)) / math.sqrt(hidden)

    def __call__(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.in_features,):
            raise ValueError(f"projector expects ({self.in_features},) features, got {features.shape}")
        return (np.tanh(features @ self.w1) @ self.w2).reshape(self.n_tokens, self.token_dim)


def embed_visual_prompt(image, encoder, projector, source: str = "reference") -> VisualPrompt:
    image = np.asarray(image, dtype=np.float64)
    tokens = projector(encoder(image))
    return VisualPrompt(source=source, image=image, embedding=np.asarray(tokens))


def fused_attention(Q, K, V, K_img, V_img, tau: float, d: int | None = None) -> np.ndarray:
    """Text-branch attention plus ``tau`` times image-branch attention.

    Each branch normalizes over its own keys. Leading batch axes broadcast.
    """
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    d = Q.shape[-1] if d is None else d
    if d <= 0:
        raise ValueError("head dimension must be positive")
    if K.shape[-1] != Q.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"text branch shapes inconsistent: Q{Q.shape} K{K.shape} V{V.shape}")
    scale = 1.0 / math.sqrt(d)
    out = softmax(Q @ np.swapaxes(K, -1, -2) * scale) @ V
    if K_img is None or tau == 0.0:
        return out
    K_img, V_img = np.asarray(K_img), np.asarray(V_img)
    if K_img.shape[-1] != Q.shape[-1] or K_img.shape[-2] != V_img.shape[-2]:
        raise ValueError(f"visual branch shapes inconsistent: K'{K_img.shape} V'{V_img.shape}")
    return out + tau * (softmax(Q @ np.swapaxes(K_img, -1, -2) * scale) @ V_img)
