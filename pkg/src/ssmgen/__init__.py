"""Data-dependent generalization measure, initialization rescaling and
regularized training for linear state-space sequence models."""

from .initialization import InitConfig, init_hippo, rescale_all_layers, rescale_c
from .measure import GenMeasureReport, compute_stats, measure_model, tau_continuous, tau_discrete
from .seqgen import ProcessSpec, SequenceDataset, sample_batch
from .ssm import SSMLayerParams, compute_kernel, discretize_zoh, forward, forward_model
from .train import TrainConfig, regularized_risk, train

__version__ = "0.1.0"

__all__ = [
    "InitConfig",
    "init_hippo",
    "rescale_all_layers",
    "rescale_c",
    "GenMeasureReport",
    "compute_stats",
    "measure_model",
    "tau_continuous",
    "tau_discrete",
    "ProcessSpec",
    "SequenceDataset",
    "sample_batch",
    "SSMLayerParams",
    "compute_kernel",
    "discretize_zoh",
    "forward",
    "forward_model",
    "TrainConfig",
    "regularized_risk",
    "train",
]
