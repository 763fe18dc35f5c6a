"""Score-distillation gradients: SDS, its two-term split, CSM and VPCSM.

Every mode returns the gradient with respect to the rendered image in
noise-prediction scale. The denoiser is treated as a constant (no Jacobian
through it); chaining through the renderer is up to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backends.base import CapabilityError, Denoiser
from .conditioning import ConditionSet
from .guidance import GuidanceConfig, PredictionBundle, apply_cfg
from .inversion import InversionError, invert, plan_inversion
from .schedule import DiffusionSchedule, NoisyLatent, forward_noise, snr

LOSS_MODES = ("sds", "cfg_only", "dif_only", "csm", "vpcsm")
OMEGAS = ("one", "one_minus_alpha_bar")


class LossComputationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    mode: str = "csm"
    omega: str = "one"
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    delta_t: int = 50
    # experiment switches, both off by default
    invert_conditional: bool = False
    uncond_keeps_visual: bool = False

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.omega not in OMEGAS:
            raise ValueError(f"omega must be one of {OMEGAS}, got {self.omega!r}")
        if self.mode in ("csm", "vpcsm") and (int(self.delta_t) != self.delta_t or self.delta_t < 1):
            raise ValueError(f"{self.mode} needs an integer delta_t >= 1")

    @property
    def inversion_based(self) -> bool:
        return self.mode in ("csm", "vpcsm")


@dataclass(eq=False)
class GradientReport:
    grad: np.ndarray
    terms: dict
    t_used: int
    mode: str
    bundle: PredictionBundle | None = None

    def __post_init__(self):
        for k, v in self.terms.items():
            if not (math.isfinite(v) and v >= 0.0):
                raise LossComputationError(f"term {k} is {v}")

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))

    def snapshots(self, cfg_scale: float) -> dict:
        """x0-space views of the step: cond/uncond Tweedie estimates and the guided one."""
        if self.bundle is None:
            return {}
        out = {"x0_cond": self.bundle.x0_cond}
        if self.bundle.eps_uncond is not None:
            out["x0_uncond"] = self.bundle.x0_uncond
            out["x0_guided"] = self.bundle.x0_guided(cfg_scale)
        return out


def omega(t: int, schedule: DiffusionSchedule, kind: str = "one") -> float:
    if kind == "one":
        return 1.0
    if kind == "one_minus_alpha_bar":
        return 1.0 - schedule.alpha_bar_at(t)
    raise ValueError(f"unknown weighting {kind!r}")


def _norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def _unconditional(conditions: ConditionSet, keep_visual: bool = False) -> ConditionSet:
    return conditions.without_text() if keep_visual else ConditionSet.null(conditions.tau)


def _query(backend: Denoiser, x, t, conditions, perturb=False, blocks="all", what="prediction"):
    try:
        return backend.eps(x, t, conditions, perturb, blocks)
    except CapabilityError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with timestep context
        raise LossComputationError(f"backend {what} failed at t={t}: {exc}") from exc


def _stochastic_bundle(x0, t, conditions, eps, backend, cfg) -> PredictionBundle:
    sched = backend.schedule
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x0.shape}")
    xt = forward_noise(NoisyLatent(x0, 0), t, eps, sched)
    ec = _query(backend, xt.data, t, conditions, what="conditional prediction")
    eu = _query(backend, xt.data, t, _unconditional(conditions, cfg.uncond_keeps_visual),
                what="unconditional prediction")
    return PredictionBundle(xt, sched, ec, eu)


def _decomposition(x0, bundle: PredictionBundle):
    x0c = bundle.x0_cond
    delta_dif = np.asarray(x0, dtype=np.float64) - x0c
    delta_cfg = bundle.x0_uncond - x0c
    return delta_dif, delta_cfg


def sds_gradient(x0, t: int, conditions: ConditionSet, eps, backend: Denoiser, cfg: LossConfig) -> GradientReport:
    """``omega(t) * (cfg_guided_eps - eps)`` at ``x_t`` noised with the given ``eps``."""
    sched = backend.schedule
    t = sched.check_t(t)
    bundle = _stochastic_bundle(x0, t, conditions, eps, backend, cfg)
    w = omega(t, sched, cfg.omega)
    grad = w * (apply_cfg(bundle, cfg.guidance) - np.asarray(eps, dtype=np.float64))
    delta_dif, delta_cfg = _decomposition(x0, bundle)
    terms = {"delta_dif": _norm(delta_dif), "delta_cfg": _norm(delta_cfg)}
    return GradientReport(grad, terms, t, "sds", bundle)


def decomposed_gradient(x0, t: int, conditions: ConditionSet, eps, backend: Denoiser, cfg: LossConfig) -> GradientReport:
    """One term of the SDS split, mapped back to noise scale with sqrt(SNR(t)).

    ``dif_only``: ``omega sqrt(SNR) (x0 - x0_cond)``;
    ``cfg_only``: ``omega lambda sqrt(SNR) (x0_uncond - x0_cond)``.
    """
    if cfg.mode not in ("cfg_only", "dif_only"):
        raise ValueError(f"decomposed_gradient handles cfg_only/dif_only, not {cfg.mode!r}")
    sched = backend.schedule
    t = sched.check_t(t)
    bundle = _stochastic_bundle(x0, t, conditions, eps, backend, cfg)
    delta_dif, delta_cfg = _decomposition(x0, bundle)
    w = omega(t, sched, cfg.omega)
    root_snr = math.sqrt(snr(t, sched))
    if cfg.mode == "dif_only":
        grad = (w * root_snr) * delta_dif
    else:
        grad = (w * cfg.guidance.cfg_scale * root_snr) * delta_cfg
    terms = {"delta_dif": _norm(delta_dif), "delta_cfg": _norm(delta_cfg)}
    return GradientReport(grad, terms, t, cfg.mode, bundle)


def inverted_latent(x0, t: int, conditions: ConditionSet, backend: Denoiser, cfg: LossConfig,
                    schedule: DiffusionSchedule | None = None) -> NoisyLatent:
    sched = schedule or backend.schedule
    plan = plan_inversion(t, cfg.delta_t, sched.T)
    cond = conditions if cfg.invert_conditional else ConditionSet.null(conditions.tau)
    try:
        return invert(NoisyLatent(np.asarray(x0), 0), plan, backend.predictor(cond), sched)
    except InversionError as exc:
        raise LossComputationError(
            f"inversion to t={t} failed at ladder position {exc.rung} of {plan.ladder}: {exc}") from exc


def csm_gradient(x0, t: int, conditions: ConditionSet, backend: Denoiser, cfg: LossConfig,
                 schedule: DiffusionSchedule | None = None) -> GradientReport:
    """``omega(t) * lambda * (eps(x_inv, y) - eps(x_inv, null))`` at the DDIM-inverted latent."""
    sched = schedule or backend.schedule
    t = sched.check_t(t)
    x_inv = inverted_latent(x0, t, conditions, backend, cfg, sched)
    ec = _query(backend, x_inv.data, t, conditions, what="conditional prediction")
    eu = _query(backend, x_inv.data, t, ConditionSet.null(conditions.tau), what="unconditional prediction")
    bundle = PredictionBundle(x_inv, sched, ec, eu)
    w = omega(t, sched, cfg.omega)
    cfg_term = cfg.guidance.cfg_scale * (ec - eu)
    grad = w * cfg_term
    terms = {"cfg_term": _norm(cfg_term)}
    return GradientReport(grad, terms, t, "csm", bundle)


def vpcsm_gradient(x0, t: int, conditions: ConditionSet, backend: Denoiser, cfg: LossConfig,
                   schedule: DiffusionSchedule | None = None) -> GradientReport:
    """``omega(t) * (lambda (eps(y, v) - eps(null, null)) + s (eps(y, v) - eps_perturbed(y, v)))``.

    All three predictions are made at the same DDIM-inverted latent; the
    perturbed one is skipped entirely when ``s = 0``.
    """
    sched = schedule or backend.schedule
    t = sched.check_t(t)
    s = cfg.guidance.pag_scale
    if s > 0.0 and not backend.capabilities.supports_perturbed_attention:
        raise CapabilityError(f"pag_scale={s} needs a backend with perturbed-attention hooks")
    x_inv = inverted_latent(x0, t, conditions, backend, cfg, sched)
    ec = _query(backend, x_inv.data, t, conditions, what="conditional prediction")
    eu = _query(backend, x_inv.data, t, _unconditional(conditions, cfg.uncond_keeps_visual),
                what="unconditional prediction")
    ep = None
    if s != 0.0:
        ep = _query(backend, x_inv.data, t, conditions, perturb=True,
                    blocks=cfg.guidance.pag_blocks, what="perturbed prediction")
    bundle = PredictionBundle(x_inv, sched, ec, eu, ep)
    w = omega(t, sched, cfg.omega)
    cfg_term = cfg.guidance.cfg_scale * (ec - eu)
    terms = {"cfg_term": _norm(cfg_term)}
    if ep is None:
        grad = w * cfg_term
    else:
        pag_term = s * (ec - ep)
        terms["pag_term"] = _norm(pag_term)
        grad = w * (cfg_term + pag_term)
    return GradientReport(grad, terms, t, "vpcsm", bundle)


def gradient(x0, t: int, conditions: ConditionSet, backend: Denoiser, cfg: LossConfig, rng=None,
             eps=None) -> GradientReport:
    """Dispatch on ``cfg.mode``. Stochastic modes draw ``eps`` from ``rng`` unless given."""
    if cfg.mode in ("csm", "vpcsm"):
        fn = csm_gradient if cfg.mode == "csm" else vpcsm_gradient
        return fn(x0, t, conditions, backend, cfg)
    if eps is None:
        if rng is None:
            raise ValueError(f"{cfg.mode} needs an rng or an explicit noise draw")
        eps = rng.standard_normal(np.shape(x0))
    if cfg.mode == "sds":
        return sds_gradient(x0, t, conditions, eps, backend, cfg)
    return decomposed_gradient(x0, t, conditions, eps, backend, cfg)
