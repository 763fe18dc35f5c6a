"""Multi-step deterministic noising by DDIM inversion.

The ladder starts at 0, takes one residual step, then fixed ``delta_t`` steps
up to the target. Each rung moves the latent with the prediction evaluated at
the rung it leaves (the source rung).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .schedule import DiffusionSchedule, NoisyLatent, tweedie_x0

NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


class InversionError(RuntimeError):
    def __init__(self, message: str, rung: int | None = None):
        super().__init__(message)
        self.rung = rung


@dataclass(frozen=True)
class InversionPlan:
    target_t: int
    delta_t: int
    residual: int
    k: int
    ladder: tuple[int, ...]  # s_0 = 0, s_1 = residual, ..., s_k = target_t

    @property
    def rungs(self) -> tuple[int, ...]:
        """The ladder without the starting point 0."""
        return self.ladder[1:]


def plan_inversion(target_t: int, delta_t: int, T: int | None = None) -> InversionPlan:
    if int(target_t) != target_t or int(delta_t) != delta_t:
        raise ValueError("target_t and delta_t must be integers")
    target_t, delta_t = int(target_t), int(delta_t)
    upper = T if T is not None else max(target_t, delta_t)
    if not 1 <= target_t <= upper:
        raise ValueError(f"target_t={target_t} outside [1, {upper}]")
    if not 1 <= delta_t <= upper:
        raise ValueError(f"delta_t={delta_t} outside [1, {upper}]")
    residual = target_t % delta_t
    if residual == 0:
        k = target_t // delta_t
        residual = delta_t
    else:
        k = target_t // delta_t + 1
    ladder = (0,) + tuple(residual + j * delta_t for j in range(k))
    return InversionPlan(target_t, delta_t, residual, k, ladder)


def _query_t(denoiser, t: int) -> int:
    # 1-indexed backends cannot be queried at t = 0
    return max(t, int(getattr(denoiser, "min_timestep", 0)))


def _checked_prediction(denoiser, x: np.ndarray, t: int, rung: int) -> np.ndarray:
    try:
        eps = np.asarray(denoiser(x, _query_t(denoiser, t)))
    except Exception as exc:  # noqa: BLE001 - re-raised with the rung index
        raise InversionError(f"denoiser failed at rung {rung} (t={t}): {exc}", rung) from exc
    if eps.shape != x.shape:
        raise InversionError(f"denoiser returned shape {eps.shape} for input {x.shape} at rung {rung}", rung)
    if not np.all(np.isfinite(eps)):
        raise InversionError(f"non-finite noise prediction at rung {rung} (t={t})", rung)
    return eps


def invert(x0, plan: InversionPlan, denoiser: NoisePredictor, schedule: DiffusionSchedule,
           trace: list | None = None, stop_at: int | None = None) -> NoisyLatent:
    """Noise ``x0`` deterministically up to ``plan.target_t``.

    ``denoiser(x, t)`` returns a noise prediction of the same shape; pass the
    unconditional branch for the standard construction. If ``trace`` is a
    list, one ``(s_j, |x|, |eps|)`` row per rung is appended to it.
    ``stop_at`` (a ladder index) ends the climb early.
    """
    x = x0 if isinstance(x0, NoisyLatent) else NoisyLatent(np.asarray(x0), 0)
    if x.t != 0:
        raise ValueError("invert starts from clean data (t=0)")
    if plan.target_t > schedule.T:
        raise ValueError(f"plan target {plan.target_t} exceeds schedule horizon {schedule.T}")
    last = plan.k if stop_at is None else int(stop_at)
    for j in range(last):
        s, s_next = plan.ladder[j], plan.ladder[j + 1]
        eps = _checked_prediction(denoiser, x.data, s, j)
        x0_hat = tweedie_x0(x, eps, schedule).astype(np.float64)
        ab = schedule.alpha_bar_at(s_next)
        data = math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise InversionError(f"non-finite latent after rung {j} (t={s_next})", j)
        if trace is not None:
            trace.append((s, float(np.linalg.norm(x.data)), float(np.linalg.norm(eps))))
        x = NoisyLatent(data.astype(x.data.dtype, copy=False), s_next)
    return x


def reverse(xt: NoisyLatent, ladder, denoiser: NoisePredictor, schedule: DiffusionSchedule) -> NoisyLatent:
    """Deterministic DDIM descent along ``ladder`` (ascending, ending at ``xt.t``)."""
    ladder = tuple(int(s) for s in ladder)
    if not ladder or ladder[-1] != xt.t:
        raise ValueError(f"ladder must end at the latent timestep {xt.t}")
    x = xt
    for j in range(len(ladder) - 1, 0, -1):
        s, s_prev = ladder[j], ladder[j - 1]
        eps = _checked_prediction(denoiser, x.data, s, j)
        x0_hat = tweedie_x0(x, eps, schedule).astype(np.float64)
        ab = schedule.alpha_bar_at(s_prev)
        data = math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps.astype(np.float64)
        x = NoisyLatent(data.astype(x.data.dtype, copy=False), s_prev)
    return x


def write_trace_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x_norm", "eps_norm"])
        for s, xn, en in rows:
            w.writerow([s, repr(xn), repr(en)])
    return path
