"""Optimal transport maps learned as normalizing flows under a sliced-Wasserstein loss."""

from .datasets import PointCloud, ShapeSpec, gen_rotated_embedding_pair, protocol_pair
from .estimator import SWOTFlow
from .flows import FlowModel, FlowSpec, MLPSpec, intermediate_outputs, model_forward, model_inverse
from .losstrain import LossConfig, Schedule, train
from .otoracle import GaussianParams
from .swdist import sample_projections, sliced_wasserstein

__all__ = [
    "FlowModel",
    "FlowSpec",
    "GaussianParams",
    "LossConfig",
    "MLPSpec",
    "PointCloud",
    "SWOTFlow",
    "Schedule",
    "ShapeSpec",
    "gen_rotated_embedding_pair",
    "intermediate_outputs",
    "model_forward",
    "model_inverse",
    "protocol_pair",
    "sample_projections",
    "sliced_wasserstein",
    "train",
]

__version__ = "0.1.0"
