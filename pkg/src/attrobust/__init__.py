"""Attributional robustness toolkit.

Trains image classifiers whose input-gradient explanations stay stable under
imperceptible input perturbations, and ships the attack / metric / localization
apparatus needed to measure that stability and put it to work.
"""

from attrobust.models import ModelBundle, build_model, input_gradient, load_checkpoint, save_checkpoint
from attrobust.metrics import cosine_alignment, kendall_tau, topk_intersection
from attrobust.attribution import AttributionMap, IGConfig, gradient_saliency, gradshap, integrated_gradients
from attrobust.attacks import AttackResult, PerturbationBudget
from attrobust.training import ARTConfig, attr_triplet_loss, select_negative_class

__all__ = [
    "ModelBundle",
    "build_model",
    "input_gradient",
    "save_checkpoint",
    "load_checkpoint",
    "topk_intersection",
    "kendall_tau",
    "cosine_alignment",
    "AttributionMap",
    "IGConfig",
    "gradient_saliency",
    "integrated_gradients",
    "gradshap",
    "PerturbationBudget",
    "AttackResult",
    "ARTConfig",
    "attr_triplet_loss",
    "select_negative_class",
]

__version__ = "0.1.0"
