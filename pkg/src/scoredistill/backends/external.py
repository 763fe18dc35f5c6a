"""Adapter for a pretrained latent-diffusion checkpoint (diffusers layout).

Opt-in only: set ``SCOREDISTILL_EXTERNAL=1`` and point
``SCOREDISTILL_EXTERNAL_WEIGHTS`` at a local model directory. Anything missing
raises :class:`BackendUnavailableError`; there is no silent fallback to the
toy backend. Torch and diffusers are imported lazily and are not package
dependencies.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..conditioning import ConditionSet
from ..schedule import DiffusionSchedule
from .base import BackendError, CapabilityError, Denoiser, DenoiserCapabilities

ENV_FLAG = "SCOREDISTILL_EXTERNAL"
ENV_WEIGHTS = "SCOREDISTILL_EXTERNAL_WEIGHTS"
SELF_ATTN = "attn1"


class BackendUnavailableError(BackendError):
    pass


def external_available() -> tuple[bool, str]:
    """``(ok, reason)`` without importing anything heavy."""
    if os.environ.get(ENV_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}:
        return False, f"set {ENV_FLAG}=1 to enable the external backend"
    path = os.environ.get(ENV_WEIGHTS)
    if not path:
        return False, f"{ENV_WEIGHTS} is not set"
    if not Path(path).is_dir():
        return False, f"{ENV_WEIGHTS}={path} is not a directory"
    import importlib.util

    for mod in ("torch", "diffusers", "transformers"):
        if importlib.util.find_spec(mod) is None:
            return False, f"python package {mod!r} is not installed"
    return True, ""


class _IdentitySelfAttention:
    """Attention processor that returns the value projection: A replaced by I."""

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kw):
        value = attn.to_v(hidden_states)
        out = attn.to_out[0](value)
        return attn.to_out[1](out)


class ExternalDenoiser(Denoiser):
    """Wraps the UNet, VAE and text encoder behind the :class:`Denoiser` interface.

    Latents are ``(4, H/8, W/8)``; ``encode``/``decode`` map [0, 1] RGB
    images of shape ``(H, W, 3)`` in and out of that space. Text conditions
    are prompt strings (``None`` is the empty prompt). Visual-prompt fusion
    needs an image-prompt adapter that is not bundled, so it is reported as
    unsupported.
    """

    def __init__(self, model_id: str | None = None, device: str = "cpu", image_size: int = 512):
        ok, reason = external_available()
        if not ok:
            raise BackendUnavailableError(f"external backend unavailable: {reason}")
        import torch
        from diffusers import AutoencoderKL, DDIMScheduler, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        root = Path(model_id or os.environ[ENV_WEIGHTS])
        try:
            self.unet = UNet2DConditionModel.from_pretrained(root, subfolder="unet").to(device).eval()
            self.vae = AutoencoderKL.from_pretrained(root, subfolder="vae").to(device).eval()
            self.tokenizer = CLIPTokenizer.from_pretrained(root, subfolder="tokenizer")
            self.text_encoder = CLIPTextModel.from_pretrained(root, subfolder="text_encoder").to(device).eval()
            sched = DDIMScheduler.from_pretrained(root, subfolder="scheduler")
        except Exception as exc:  # noqa: BLE001
            raise BackendUnavailableError(f"could not load weights from {root}: {exc}") from exc
        self.torch = torch
        self.device = device
        self.vae_scale = float(getattr(self.vae.config, "scaling_factor", 0.18215))
        betas = np.asarray(sched.betas.numpy(), dtype=np.float64)
        self._published_alpha_bar = np.asarray(sched.alphas_cumprod.numpy(), dtype=np.float64)
        self.schedule = DiffusionSchedule.from_betas(betas, family=str(sched.config.beta_schedule))
        self._default_procs = dict(self.unet.attn_processors)
        self._text_cache: dict = {}
        side = image_size // 8
        self.capabilities = DenoiserCapabilities(
            supports_visual_condition=False, supports_perturbed_attention=True,
            concurrent_queries=False, latent_shape=(4, side, side), T=self.schedule.T,
            attention_blocks=tuple(sorted({k.split(".processor")[0] for k in self._default_procs if SELF_ATTN in k})),
            min_timestep=0)

    def published_schedule(self) -> np.ndarray:
        """``alphas_cumprod`` exactly as shipped with the checkpoint's scheduler."""
        return self._published_alpha_bar

    def _embed(self, text):
        key = "" if text is None else str(text)
        if key not in self._text_cache:
            tok = self.tokenizer([key], padding="max_length", max_length=self.tokenizer.model_max_length,
                                 truncation=True, return_tensors="pt")
            with self.torch.no_grad():
                self._text_cache[key] = self.text_encoder(tok.input_ids.to(self.device))[0]
        return self._text_cache[key]

    def _set_perturbed(self, blocks):
        procs = dict(self._default_procs)
        for name in procs:
            if SELF_ATTN in name and (blocks == "all" or any(name.startswith(b) for b in blocks)):
                procs[name] = _IdentitySelfAttention()
        self.unet.set_attn_processor(procs)

    def _predict(self, x, t, conditions: ConditionSet, perturb, blocks):
        if conditions.has_visual:
            raise CapabilityError("external backend has no image-prompt adapter configured")
        torch = self.torch
        emb = self._embed(conditions.text)
        if perturb:
            self._set_perturbed(blocks)
        try:
            with torch.no_grad():
                xt = torch.as_tensor(x, dtype=torch.float32, device=self.device)
                out = self.unet(xt, int(t), encoder_hidden_states=emb.expand(xt.shape[0], -1, -1)).sample
        finally:
            if perturb:
                self.unet.set_attn_processor(dict(self._default_procs))
        return out.cpu().numpy().astype(np.float64)

    def encode(self, image):
        torch = self.torch
        img = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None] * 2.0 - 1.0
        with torch.no_grad():
            lat = self.vae.encode(img.to(self.device)).latent_dist.mean * self.vae_scale
        return lat[0].cpu().numpy().astype(np.float64)

    def encode_vjp(self, image, cotangent):
        torch = self.torch
        img = torch.as_tensor(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)[None].to(self.device)
        img.requires_grad_(True)
        lat = self.vae.encode(img * 2.0 - 1.0).latent_dist.mean * self.vae_scale
        lat.backward(torch.as_tensor(np.asarray(cotangent, dtype=np.float32))[None].to(self.device))
        return img.grad[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)

    def decode(self, latent):
        torch = self.torch
        lat = torch.as_tensor(np.asarray(latent, dtype=np.float32))[None].to(self.device) / self.vae_scale
        with torch.no_grad():
            img = self.vae.decode(lat).sample
        return ((img[0].permute(1, 2, 0).cpu().numpy() + 1.0) / 2.0).astype(np.float64)


def external_adapter(model_id: str | None = None, device: str = "cpu") -> ExternalDenoiser:
    return ExternalDenoiser(model_id, device)
