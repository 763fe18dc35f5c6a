"""Discrete diffusion schedule, forward noising, Tweedie estimate and DDIM steps.

Timesteps are integers in ``[0, T]``. ``alpha_bar`` of timestep 0 is exactly 1,
so ``t = 0`` stands for clean data and is a valid DDIM reverse target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEDULE_FAMILIES = ("linear", "scaled_linear", "cosine")


class ScheduleError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Noise schedule over ``T`` steps.

    ``beta[t - 1]`` and ``alpha_bar[t - 1]`` hold the values of timestep ``t``;
    use :meth:`alpha_bar_at` for 0-based-safe lookups that include ``t = 0``.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    family: str = "custom"
    _ab0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = _readonly(self.beta)
        alpha_bar = _readonly(self.alpha_bar)
        if beta.shape != (self.T,) or alpha_bar.shape != (self.T,):
            raise ScheduleError("beta and alpha_bar must both have length T")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "_ab0", _readonly(np.concatenate([[1.0], alpha_bar])))

    @classmethod
    def from_betas(cls, beta, family: str = "custom") -> "DiffusionSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ScheduleError(f"need T >= 2 betas, got shape {beta.shape}")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        if np.any(alpha_bar <= 0.0):
            raise ScheduleError("alpha_bar underflowed to 0")
        return cls(T=int(beta.size), beta=beta, alpha_bar=alpha_bar, family=family)

    def check_t(self, t: int, lo: int = 1) -> int:
        if int(t) != t:
            raise ScheduleError(f"timestep must be an integer, got {t!r}")
        t = int(t)
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        return float(self._ab0[self.check_t(t, lo=0)])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_t(t) - 1])

    def snr(self, t: int) -> float:
        return snr(t, self)

    def to_rows(self) -> np.ndarray:
        t = np.arange(1, self.T + 1, dtype=np.float64)
        return np.column_stack([t, self.beta, self.alpha_bar])


def make_schedule(T: int = 1000, family: str = "linear", **params) -> DiffusionSchedule:
    """Build a schedule.

    ``linear`` and ``scaled_linear`` take ``beta_start``/``beta_end``;
    ``cosine`` takes ``s`` (offset) and ``max_beta``.
    """
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if family == "linear":
        b0 = params.pop("beta_start", 1e-4)
        b1 = params.pop("beta_end", 2e-2)
        beta = np.linspace(b0, b1, T, dtype=np.float64)
    elif family == "scaled_linear":
        b0 = params.pop("beta_start", 0.00085)
        b1 = params.pop("beta_end", 0.012)
        beta = np.linspace(math.sqrt(b0), math.sqrt(b1), T, dtype=np.float64) ** 2
    elif family == "cosine":
        s = params.pop("s", 0.008)
        max_beta = params.pop("max_beta", 0.999)

        def f(u):
            return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2

        beta = np.array([min(1 - f((i + 1) / T) / f(i / T), max_beta) for i in range(T)])
    else:
        raise ScheduleError(f"unknown schedule family {family!r}; expected one of {SCHEDULE_FAMILIES}")
    if params:
        raise ScheduleError(f"unexpected parameters for {family}: {sorted(params)}")
    return DiffusionSchedule.from_betas(beta, family=family)


def save_schedule(schedule: DiffusionSchedule, path) -> Path:
    """One row per timestep: ``t, beta_t, alpha_bar_t``."""
    path = Path(path)
    np.savetxt(path, schedule.to_rows(), fmt=["%d", "%.17g", "%.17g"], delimiter=",",
               header="t,beta,alpha_bar", comments="")
    return path


def load_schedule(path) -> DiffusionSchedule:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if not np.array_equal(rows[:, 0], np.arange(1, rows.shape[0] + 1)):
        raise ScheduleError(f"{path}: timestep column must run 1..T")
    sched = DiffusionSchedule.from_betas(rows[:, 1])
    if not np.allclose(sched.alpha_bar, rows[:, 2], rtol=1e-12, atol=0.0):
        raise ScheduleError(f"{path}: alpha_bar column is not the cumulative product of beta")
    return sched


@dataclass(frozen=True, eq=False)
class NoisyLatent:
    """A tensor tagged with its timestep (``t = 0`` means clean data)."""

    data: np.ndarray
    t: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"latent at t={self.t} contains non-finite values")
        if int(self.t) != self.t or self.t < 0:
            raise ValueError(f"timestep must be a non-negative integer, got {self.t!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "t", int(self.t))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class DDIMStepConfig:
    eta: float = 0.0

    def __post_init__(self):
        if not (self.eta >= 0.0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be finite and >= 0, got {self.eta}")


def _as_latent(x) -> NoisyLatent:
    return x if isinstance(x, NoisyLatent) else NoisyLatent(np.asarray(x), 0)


def _cast(value: np.ndarray, like: np.ndarray) -> np.ndarray:
    return value.astype(like.dtype, copy=False)


def forward_noise(x0, t: int, eps, schedule: DiffusionSchedule) -> NoisyLatent:
    """``x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps``."""
    x0 = _as_latent(x0)
    if x0.t != 0:
        raise ValueError(f"forward_noise expects clean data (t=0), got t={x0.t}")
    t = schedule.check_t(t)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    ab = schedule.alpha_bar_at(t)
    xt = math.sqrt(ab) * x0.data.astype(np.float64) + math.sqrt(1.0 - ab) * eps.astype(np.float64)
    return NoisyLatent(_cast(xt, x0.data), t)


def tweedie_x0(xt: NoisyLatent, eps_pred, schedule: DiffusionSchedule) -> np.ndarray:
    """Posterior-mean estimate of clean data from ``x_t`` and a noise prediction."""
    t = schedule.check_t(xt.t, lo=0)
    eps_pred = np.asarray(eps_pred)
    if eps_pred.shape != xt.shape:
        raise ValueError(f"prediction shape {eps_pred.shape} != latent shape {xt.shape}")
    if not np.all(np.isfinite(eps_pred)):
        raise ValueError(f"non-finite noise prediction at t={t}")
    ab = schedule.alpha_bar_at(t)
    x0 = (xt.data.astype(np.float64) - math.sqrt(1.0 - ab) * eps_pred.astype(np.float64)) / math.sqrt(ab)
    return _cast(x0, xt.data)


def ddim_reverse_step(xt: NoisyLatent, eps_pred, t_prev: int, schedule: DiffusionSchedule,
                      cfg: DDIMStepConfig = DDIMStepConfig(), rng=None) -> NoisyLatent:
    """Move ``x_t`` to timestep ``t_prev < t`` with the DDIM update.

    With ``eta > 0`` the stochastic variant adds ``eta * beta_t`` Gaussian
    noise and needs ``rng``.
    """
    t_prev = schedule.check_t(t_prev, lo=0)
    if t_prev >= xt.t:
        raise ValueError(f"t_prev={t_prev} must be smaller than t={xt.t}")
    x0_hat = tweedie_x0(xt, eps_pred, schedule).astype(np.float64)
    ab_prev = schedule.alpha_bar_at(t_prev)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if cfg.eta == 0.0:
        out = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred
    else:
        if rng is None:
            raise ValueError("stochastic DDIM (eta > 0) needs an rng")
        sigma = cfg.eta * schedule.beta_at(xt.t)
        dir_var = 1.0 - ab_prev - sigma**2
        if dir_var < 0.0:
            raise ValueError(f"eta={cfg.eta} too large at t={xt.t}")
        out = (math.sqrt(ab_prev) * x0_hat + math.sqrt(dir_var) * eps_pred
               + sigma * rng.standard_normal(eps_pred.shape))
    return NoisyLatent(_cast(out, xt.data), t_prev)


def snr(t: int, schedule: DiffusionSchedule) -> float:
    ab = schedule.alpha_bar_at(schedule.check_t(t))
    return ab / (1.0 - ab)


def continuous_to_step(u: float, T: int) -> int:
    """Map ``u`` in (0, 1) to an integer step, rounding half up, clamped to [1, T]."""
    return min(max(int(math.floor(u * T + 0.5)), 1), T)
