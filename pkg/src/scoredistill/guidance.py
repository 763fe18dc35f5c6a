"""Classifier-free and perturbed-attention guidance over noise predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .schedule import DiffusionSchedule, NoisyLatent, tweedie_x0


@dataclass(frozen=True)
class GuidanceConfig:
    cfg_scale: float = 7.5
    pag_scale: float = 1.0
    pag_blocks: Union[str, Sequence[str]] = "all"

    def __post_init__(self):
        for name in ("cfg_scale", "pag_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not isinstance(self.pag_blocks, str):
            object.__setattr__(self, "pag_blocks", tuple(self.pag_blocks))
        elif self.pag_blocks != "all":
            raise ValueError("pag_blocks must be 'all' or a list of block names")


@dataclass(frozen=True, eq=False)
class PredictionBundle:
    """Predictions made at one noisy latent.

    The Tweedie estimates are derived on access from the stored predictions,
    so they can never drift out of sync with them.
    """

    xt: NoisyLatent
    schedule: DiffusionSchedule
    eps_cond: np.ndarray
    eps_uncond: Optional[np.ndarray] = None
    eps_perturbed: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("eps_cond", "eps_uncond", "eps_perturbed"):
            v = getattr(self, name)
            if v is not None and np.shape(v) != self.xt.shape:
                raise ValueError(f"{name} has shape {np.shape(v)}, latent has {self.xt.shape}")

    @property
    def x0_cond(self) -> np.ndarray:
        return tweedie_x0(self.xt, self.eps_cond, self.schedule)

    @property
    def x0_uncond(self) -> np.ndarray:
        if self.eps_uncond is None:
            raise ValueError("bundle has no unconditional prediction")
        return tweedie_x0(self.xt, self.eps_uncond, self.schedule)

    def x0_guided(self, cfg_scale: float) -> np.ndarray:
        """``x0_cond + lambda * (x0_cond - x0_uncond)``, the CFG-applied clean estimate."""
        c = self.x0_cond
        return c + cfg_scale * (c - self.x0_uncond)


def apply_cfg(bundle: PredictionBundle, cfg: GuidanceConfig) -> np.ndarray:
    if bundle.eps_uncond is None:
        raise ValueError("classifier-free guidance needs an unconditional prediction")
    lam = cfg.cfg_scale
    if lam == 0.0:
        return bundle.eps_cond.copy()
    return (1.0 + lam) * bundle.eps_cond - lam * bundle.eps_uncond


def apply_pag(bundle: PredictionBundle, cfg: GuidanceConfig) -> np.ndarray:
    s = cfg.pag_scale
    if s == 0.0:
        return bundle.eps_cond.copy()
    if bundle.eps_perturbed is None:
        raise ValueError(f"pag_scale={s} needs a perturbed-attention prediction")
    return bundle.eps_cond + s * (bundle.eps_cond - bundle.eps_perturbed)


def guidance_direction(bundle: PredictionBundle, cfg: GuidanceConfig) -> np.ndarray:
    """``lambda (eps_c - eps_u) + s (eps_c - eps_perturbed)``; the PAG part is skipped when s = 0."""
    out = cfg.cfg_scale * (bundle.eps_cond - bundle.eps_uncond)
    if cfg.pag_scale != 0.0:
        if bundle.eps_perturbed is None:
            raise ValueError(f"pag_scale={cfg.pag_scale} needs a perturbed-attention prediction")
        out = out + cfg.pag_scale * (bundle.eps_cond - bundle.eps_perturbed)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_map(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    d = Q.shape[-1]
    return softmax(Q @ np.swapaxes(K, -1, -2) / math.sqrt(d), axis=-1)


def self_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    return attention_map(Q, K) @ V


def perturb_self_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Self-attention with the attention map replaced by the identity: returns ``V``.

    Q and K are only shape-checked.
    """
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    if Q.shape[-2] != K.shape[-2]:
        raise ValueError("identity attention needs as many queries as keys")
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError("query and key widths differ")
    return V.copy()
