# src/nncore/__init__.py
from src.nncore.checkpoint import load_into, read_checkpoint, save_checkpoint
from src.nncore.encoders import (
    EncoderConfig,
    GraphEncoder,
    GraphSegmenter,
    PointEncoder,
    PointSegmenter,
    SALevelConfig,
    edge_mean,
    farthest_point_sample,
)
from src.nncore.gradcheck import GradCheckReport, grad_check
from src.nncore.layers import MLP, GATLayer, cross_entropy, grouped_max_pool, idw_gather, max_pool_set
from src.nncore.store import ParameterStore, adam_step, backward, mlp_forward

__all__ = [
    "EncoderConfig",
    "GATLayer",
    "GradCheckReport",
    "GraphEncoder",
    "GraphSegmenter",
    "MLP",
    "ParameterStore",
    "PointEncoder",
    "PointSegmenter",
    "SALevelConfig",
    "adam_step",
    "backward",
    "cross_entropy",
    "edge_mean",
    "farthest_point_sample",
    "grad_check",
    "grouped_max_pool",
    "idw_gather",
    "load_into",
    "max_pool_set",
    "mlp_forward",
    "read_checkpoint",
    "save_checkpoint",
]
