"""Independent reference computations used by the tests and the acceptance suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backends.base import Denoiser, DenoiserCapabilities
from .conditioning import ConditionSet
from .guidance import apply_cfg
from .kernels import mixture_posterior_x0
from .losses import LossConfig, _stochastic_bundle, omega
from .schedule import DiffusionSchedule, snr


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    modes: np.ndarray
    sigma: float
    weights: np.ndarray = None

    def __post_init__(self):
        modes = np.atleast_2d(np.asarray(self.modes, dtype=np.float64))
        w = np.full(len(modes), 1.0 / len(modes)) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(modes),) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.modes.shape[1]

    def subset(self, idx) -> "MixtureSpec":
        idx = list(idx)
        w = self.weights[idx]
        return MixtureSpec(self.modes[idx], self.sigma, w / w.sum())

    def sample(self, rng, n: int):
        comp = rng.choice(len(self.modes), size=n, p=self.weights)
        return self.modes[comp] + self.sigma * rng.standard_normal((n, self.dim)), comp


def four_mode_mixture(sigma: float = 0.05) -> MixtureSpec:
    return MixtureSpec(np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]), sigma)


def optimal_x0(x, t: int, mixture: MixtureSpec, schedule: DiffusionSchedule) -> np.ndarray:
    ab = schedule.alpha_bar_at(schedule.check_t(t))
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, mixture.dim)
    return mixture_posterior_x0(flat, mixture.modes, mixture.weights, mixture.sigma, ab).reshape(x.shape)


def optimal_denoiser(x, t: int, mixture: MixtureSpec, schedule: DiffusionSchedule) -> np.ndarray:
    """Exact noise prediction implied by the mixture's posterior mean at step ``t >= 1``."""
    ab = schedule.alpha_bar_at(schedule.check_t(t))
    x = np.asarray(x, dtype=np.float64)
    return (x - math.sqrt(ab) * optimal_x0(x, t, mixture, schedule)) / math.sqrt(1.0 - ab)


class MixtureDenoiser(Denoiser):
    """Closed-form backend for a known mixture.

    ``class_modes[i]`` lists the mode indices of text condition ``i + 1``; the
    null condition uses the whole mixture. No attention, so no PAG or visual
    conditioning; queries at t = 0 are answered at t = 1.
    """

    def __init__(self, mixture: MixtureSpec, schedule: DiffusionSchedule, class_modes=None):
        self.mixture = mixture
        self.schedule = schedule
        self.class_modes = [list(c) for c in (class_modes or [[i] for i in range(len(mixture.modes))])]
        self._subsets = [mixture.subset(c) for c in self.class_modes]
        self.capabilities = DenoiserCapabilities(
            supports_visual_condition=False, supports_perturbed_attention=False,
            concurrent_queries=True, latent_shape=(mixture.dim,), T=schedule.T, min_timestep=1)

    def mixture_for(self, text) -> MixtureSpec:
        if text is None:
            return self.mixture
        i = int(text)
        if not 1 <= i <= len(self._subsets):
            raise ValueError(f"class id {i} outside [1, {len(self._subsets)}]")
        return self._subsets[i - 1]

    def _predict(self, x, t, conditions: ConditionSet, perturb, blocks):
        return optimal_denoiser(x, max(t, 1), self.mixture_for(conditions.text), self.schedule)


def finite_difference_grad(fn, x, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of a scalar ``fn`` at ``x``.

    ``indices`` (flat positions) restricts the probe; other entries are NaN.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation near flat index {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@dataclass
class DecompositionReport:
    max_rel_deviation: float
    deviations: list = field(default_factory=list)
    trials: int = 0


def check_sds_decomposition(x0, t, backend: Denoiser, schedule: DiffusionSchedule | None = None,
                            trials: int = 100, conditions: ConditionSet | None = None,
                            cfg: LossConfig | None = None, rng=None) -> DecompositionReport:
    """Compare the noise-space SDS gradient with ``sqrt(SNR) (d_dif + lambda d_cfg)``.

    ``x0`` and ``t`` may be fixed values or callables ``rng -> value`` drawn per trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sched = schedule or backend.schedule
    cfg = cfg or LossConfig(mode="sds")
    conditions = conditions if conditions is not None else ConditionSet(1)
    rng = rng if rng is not None else np.random.default_rng(0)
    lam = cfg.guidance.cfg_scale
    devs = []
    for _ in range(trials):
        xi = np.asarray(x0(rng) if callable(x0) else x0, dtype=np.float64)
        ti = int(t(rng) if callable(t) else t)
        eps = rng.standard_normal(xi.shape)
        bundle = _stochastic_bundle(xi, ti, conditions, eps, backend, cfg)
        w = omega(ti, sched, cfg.omega)
        noise_path = w * (apply_cfg(bundle, cfg.guidance) - eps)
        x0c = bundle.x0_cond
        delta_dif = xi - x0c
        delta_cfg = bundle.x0_uncond - x0c
        x0_path = w * math.sqrt(snr(ti, sched)) * (delta_dif + lam * delta_cfg)
        devs.append(relative_error(x0_path, noise_path))
    return DecompositionReport(max(devs), devs, trials)
