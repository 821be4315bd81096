"""Losses, gradients, optimization and sampling for AMES training."""

from .backprop import DivergenceError, PairBatch, batch_loss, loss_gradients
from .fit import DistillationSetup, FitResult, TrainConfig, TrainingDiverged, fit, initial_params
from .losses import balanced_bce, bce_loss, distill_loss, score_distill_loss, total_loss
from .optim import AdamWState, cosine_lr, optimizer_step
from .sampling import PairExample, epoch_triplets, nearest_neighbors, sample_lengths

__all__ = [
    "AdamWState", "DistillationSetup", "DivergenceError", "FitResult", "PairBatch",
    "PairExample", "TrainConfig", "TrainingDiverged", "balanced_bce", "batch_loss",
    "bce_loss", "cosine_lr", "distill_loss", "epoch_triplets", "fit", "initial_params",
    "loss_gradients", "nearest_neighbors", "optimizer_step", "sample_lengths",
    "score_distill_loss", "total_loss",
]
