"""Discriminator-coordinated parallel convolutional networks on a numpy autograd engine.

Layers of the package, bottom up: ``autograd`` (tensors and reverse mode),
``functional`` / ``layers`` (differentiable ops and modules), ``models``
(backbones, discriminator, extra classifier), ``engine`` (three-phase
training, baselines, divergence probe), ``data`` / ``checkpoint`` (I/O),
``gradcam`` and ``cli``.
"""

from .autograd import Tensor, backward, no_grad
from .config import ExperimentConfig, load_config, parse_config
from .engine import (DPCN, DpcnConfig, LossBundle, Phase, PhaseState, Trainer, divergence_probe,
                     ensemble_baseline, fuse, predict, step1_losses, step2_losses, subnet_target)
from .gradcam import Heatmap, grad_cam, heatmap_overlap, render_heatmap
from .models import build_discriminator, build_extra_classifier, build_small_nin, build_small_resnet

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "ExperimentConfig", "load_config", "parse_config", "DPCN",
    "DpcnConfig", "LossBundle", "Phase", "PhaseState", "Trainer", "divergence_probe",
    "ensemble_baseline", "fuse", "predict", "step1_losses", "step2_losses", "subnet_target",
    "Heatmap", "grad_cam", "heatmap_overlap", "render_heatmap", "build_discriminator",
    "build_extra_classifier", "build_small_nin", "build_small_resnet",
]
