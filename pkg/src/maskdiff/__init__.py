"""Mask-constrained diffusion editing and dataset-shift stress testing."""

from .conditions import Condition
from .denoiser import AnalyticGaussianDenoiser, ConditionalDenoiser, GaussianPrior
from .editing import EditRequest, EditResult, cfg_combine, diffedit_edit, estimate_edit_mask, lance_edit, radedit
from .inversion import InversionRecord, ddim_invert, ddpm_invert
from .predictors import LesionClassifier, LungSegmenter
from .schedule import NoiseSchedule, make_linear_schedule
from .scoring import RegionStatsEmbedder, filter_edits
from .stresstest import StressConfig, run_inversion_ablation, run_mask_estimation_eval, run_scenario

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianDenoiser",
    "Condition",
    "ConditionalDenoiser",
    "EditRequest",
    "EditResult",
    "GaussianPrior",
    "InversionRecord",
    "LesionClassifier",
    "LungSegmenter",
    "NoiseSchedule",
    "RegionStatsEmbedder",
    "StressConfig",
    "cfg_combine",
    "ddim_invert",
    "ddpm_invert",
    "diffedit_edit",
    "estimate_edit_mask",
    "filter_edits",
    "lance_edit",
    "make_linear_schedule",
    "radedit",
    "run_inversion_ablation",
    "run_mask_estimation_eval",
    "run_scenario",
]
