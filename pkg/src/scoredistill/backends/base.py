"""Denoiser interface shared by the toy, oracle and external backends."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union, Sequence

import numpy as np

from ..conditioning import ConditionSet
from ..schedule import DiffusionSchedule


class CapabilityError(RuntimeError):
    pass


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserCapabilities:
    supports_visual_condition: bool
    supports_perturbed_attention: bool
    concurrent_queries: bool
    latent_shape: tuple
    T: int
    visual_tokens: int = 0
    visual_dim: int = 0
    attention_blocks: tuple = ()
    min_timestep: int = 0

    def as_dict(self) -> dict:
        return {
            "supports_visual_condition": self.supports_visual_condition,
            "supports_perturbed_attention": self.supports_perturbed_attention,
            "concurrent_queries": self.concurrent_queries,
            "latent_shape": list(self.latent_shape),
            "T": self.T,
            "visual_tokens": self.visual_tokens,
            "visual_dim": self.visual_dim,
            "attention_blocks": list(self.attention_blocks),
            "min_timestep": self.min_timestep,
        }


@dataclass(frozen=True, eq=False)
class DenoiserQuery:
    x: np.ndarray
    t: int
    conditions: ConditionSet = field(default_factory=ConditionSet.null)
    perturb_attention: bool = False
    perturb_blocks: Union[str, Sequence[str]] = "all"


class Denoiser:
    """Base class: subclasses implement :meth:`_predict` on a batch.

    ``x`` may be a single latent of ``latent_shape`` or a batch with one
    extra leading axis; the output matches the input shape.
    """

    capabilities: DenoiserCapabilities
    schedule: DiffusionSchedule

    @property
    def min_timestep(self) -> int:
        return self.capabilities.min_timestep

    @property
    def latent_shape(self) -> tuple:
        return tuple(self.capabilities.latent_shape)

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Map a renderer image into the backend's latent space (identity by default)."""
        return np.asarray(image, dtype=np.float64)

    def encode_vjp(self, image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        return np.asarray(cotangent, dtype=np.float64)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.asarray(latent, dtype=np.float64)

    def validate(self, query: DenoiserQuery) -> tuple[np.ndarray, bool]:
        caps = self.capabilities
        x = np.asarray(query.x)
        shape = tuple(caps.latent_shape)
        if x.shape == shape:
            batched = False
        elif x.shape[1:] == shape:
            batched = True
        else:
            raise ValueError(f"latent shape {x.shape} incompatible with backend shape {shape}")
        t = query.t
        if int(t) != t or not 0 <= t <= caps.T:
            raise ValueError(f"timestep {t} outside [0, {caps.T}]")
        if query.perturb_attention and not caps.supports_perturbed_attention:
            raise CapabilityError(f"{type(self).__name__} has no perturbed-attention hook")
        vis = query.conditions.visual
        if vis is not None:
            if not caps.supports_visual_condition:
                if np.any(vis):
                    raise CapabilityError(f"{type(self).__name__} does not accept visual conditions")
            elif vis.shape != (caps.visual_tokens, caps.visual_dim):
                raise ValueError(f"visual tokens {vis.shape} != backend ({caps.visual_tokens}, {caps.visual_dim})")
        return x, batched

    def predict(self, query: DenoiserQuery) -> np.ndarray:
        x, batched = self.validate(query)
        xb = x if batched else x[None]
        out = self._predict(xb, int(query.t), query.conditions, query.perturb_attention, query.perturb_blocks)
        out = np.asarray(out, dtype=xb.dtype)
        if out.shape != xb.shape:
            raise BackendError(f"backend returned {out.shape} for input {xb.shape}")
        return out if batched else out[0]

    def _predict(self, x, t, conditions, perturb, blocks) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def eps(self, x, t: int, conditions: ConditionSet | None = None, perturb: bool = False,
            blocks="all") -> np.ndarray:
        conditions = ConditionSet.null() if conditions is None else conditions
        return self.predict(DenoiserQuery(np.asarray(x), int(t), conditions, perturb, blocks))

    def predictor(self, conditions: ConditionSet | None = None):
        """A ``(x, t) -> eps`` callable bound to fixed conditions, for inversion."""
        conditions = ConditionSet.null() if conditions is None else conditions

        def call(x, t):
            return self.eps(x, t, conditions)

        call.min_timestep = self.min_timestep
        return call

    def info(self) -> dict:
        return {"backend": type(self).__name__, **self.capabilities.as_dict()}


def predict(query: DenoiserQuery, backend: Denoiser) -> np.ndarray:
    return backend.predict(query)
