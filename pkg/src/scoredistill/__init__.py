"""Score distillation toolkit: SDS/CSM/VPCSM gradients, DDIM inversion, SGC losses and toy backends."""

from .conditioning import ConditionSet, VisualPrompt, fused_attention
from .guidance import GuidanceConfig, PredictionBundle, apply_cfg, apply_pag
from .inversion import InversionPlan, invert, plan_inversion, reverse
from .losses import LossConfig, csm_gradient, gradient, sds_gradient, vpcsm_gradient
from .schedule import DiffusionSchedule, NoisyLatent, forward_noise, make_schedule, snr, tweedie_x0
from .sgc import SGCWeights, sgc_loss
from .timesteps import TimestepWindow, sample_t, window_at
from .views import CameraPose, MultiViewReference, ViewGrid

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "ConditionSet", "DiffusionSchedule", "GuidanceConfig", "InversionPlan", "LossConfig",
    "MultiViewReference", "NoisyLatent", "PredictionBundle", "SGCWeights", "TimestepWindow", "ViewGrid",
    "VisualPrompt", "apply_cfg", "apply_pag", "csm_gradient", "forward_noise", "fused_attention", "gradient",
    "invert", "make_schedule", "plan_inversion", "reverse", "sample_t", "sds_gradient", "sgc_loss", "snr",
    "tweedie_x0", "vpcsm_gradient", "window_at",
]
