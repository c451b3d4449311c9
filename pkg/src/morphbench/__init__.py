"""Identity-prior latent morph generation and its evaluation stack.

The package splits into:

* :mod:`morphbench.autodiff` -- dense float64 tensors with reverse-mode
  differentiation,
* :mod:`morphbench.losses` -- perceptual / identity / identity-difference
  / multi-scale structural-similarity losses and their composite,
* :mod:`morphbench.models` -- pluggable generator/embedder/perceptual
  bundles, deterministic toy models, weight container i/o,
* :mod:`morphbench.engine` -- latent averaging, Adam with lr decay, and
  the end-to-end morph optimization loop,
* :mod:`morphbench.quality` -- PSNR/SSIM morph quality with confidence
  intervals,
* :mod:`morphbench.vulnerability` -- threshold/FNMR/MMPMR/FMMPMR/RMMR
  over comparison-score files,
* :mod:`morphbench.mad` -- APCER/BPCER/D-EER detector evaluation,
* :mod:`morphbench.cli` -- the ``morphbench`` command.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, grad_check
from .engine import (
    AdamState,
    LatentCode,
    MorphResult,
    OptimizerConfig,
    adam_step,
    average_latents,
    lr_at,
    optimize_morph,
)
from .losses import (
    FeatureStack,
    LossWeights,
    MsSsimParams,
    composite_loss,
    id_diff_loss,
    identity_loss,
    identity_loss_grad_closed_form,
    ms_ssim,
    ms_ssim_loss,
    perceptual_loss,
    ssim_components,
)
from .mad import MadScoreSet, apcer_bpcer_at, bpcer_at_apcer, d_eer, mad_grid_report
from .models import ModelBundle, load_model_weights, make_toy_models, save_model_weights
from .quality import CiSummary, QualityRecord, morph_quality, psnr, ssim_global, summarize_ci
from .vulnerability import (
    ScoreSet,
    VulnReport,
    fmmpmr,
    fnmr_at,
    mmpmr,
    rmmr,
    threshold_at_fmr,
    vulnerability_report,
)

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "AdamState",
    "LatentCode",
    "MorphResult",
    "OptimizerConfig",
    "adam_step",
    "average_latents",
    "lr_at",
    "optimize_morph",
    "FeatureStack",
    "LossWeights",
    "MsSsimParams",
    "composite_loss",
    "id_diff_loss",
    "identity_loss",
    "identity_loss_grad_closed_form",
    "ms_ssim",
    "ms_ssim_loss",
    "perceptual_loss",
    "ssim_components",
    "MadScoreSet",
    "apcer_bpcer_at",
    "bpcer_at_apcer",
    "d_eer",
    "mad_grid_report",
    "ModelBundle",
    "load_model_weights",
    "make_toy_models",
    "save_model_weights",
    "CiSummary",
    "QualityRecord",
    "morph_quality",
    "psnr",
    "ssim_global",
    "summarize_ci",
    "ScoreSet",
    "VulnReport",
    "fmmpmr",
    "fnmr_at",
    "mmpmr",
    "rmmr",
    "threshold_at_fmr",
    "vulnerability_report",
]
