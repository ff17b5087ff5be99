"""Frozen language backbone for low-level vision.

A frozen autoregressive text transformer accepts, processes, and emits
continuous visual feature tokens through two trainable linear adapters and a
trainable task-token sequence. The package is self-contained: its own
reverse-mode autodiff engine, a masked-autoencoder vision codec, a toy image
and text corpus, the degradation/metric suite, and every control experiment,
all driven by one CLI.
"""

from . import ndgrad
from .ablations import (ExpertModel, IdentityMetrics, LayerProbe, LinearFeatureMap,
                        VitLlmModel, cauchy_abs_mean, cauchy_expectation,
                        identity_metrics, scaled_identity_metrics)
from .backbone import SPECIALS, SpecialTokens, TextBackbone
from .core import (GenerationError, Lm4lvRestorer, SequenceTemplate, evaluate,
                   mae_r_baseline, misalignment_rate, task_pair)
from .imaging import DegradationSpec, MetricReport, psnr, ssim
from .mae import CrippledCodec, MaskedAutoencoderCodec, patchify, unpatchify
from .ndgrad import AdamW, Tensor, adamw_step, warmup_cosine_lr

__all__ = [
    "AdamW", "CrippledCodec", "DegradationSpec", "ExpertModel",
    "GenerationError", "IdentityMetrics", "LayerProbe", "LinearFeatureMap",
    "Lm4lvRestorer", "MaskedAutoencoderCodec", "MetricReport", "SPECIALS",
    "SequenceTemplate", "SpecialTokens", "Tensor", "TextBackbone",
    "VitLlmModel", "adamw_step", "cauchy_abs_mean", "cauchy_expectation",
    "evaluate", "identity_metrics", "mae_r_baseline", "misalignment_rate",
    "ndgrad", "patchify", "psnr", "scaled_identity_metrics", "ssim",
    "task_pair", "unpatchify", "warmup_cosine_lr",
]

__version__ = "0.1.0"
