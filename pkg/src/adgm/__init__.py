"""Auxiliary deep generative models (VAE, AVAE, ADGM, SDGM, M2) on a numpy autodiff tape."""

from .autodiff import Tape, Tensor, backward, grad_check
from .bounds import (
    Batch,
    alpha,
    avae_elbo,
    labeled_bound,
    labeled_objective,
    m2_bounds,
    potential_fit_bound,
    total_objective,
    unlabeled_bound,
    vae_elbo,
)
from .models import Kind, Model, ModelVariant
from .trainer import TrainConfig, TrainData, train

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "Kind",
    "Model",
    "ModelVariant",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainData",
    "alpha",
    "avae_elbo",
    "backward",
    "grad_check",
    "labeled_bound",
    "labeled_objective",
    "m2_bounds",
    "potential_fit_bound",
    "total_objective",
    "train",
    "unlabeled_bound",
    "vae_elbo",
]
