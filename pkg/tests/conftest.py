# tests/conftest.py
import os
import tempfile

os.environ.setdefault("TREELABEL_LOG", "WARNING")
os.environ.setdefault("TREELABEL_LOG_DIR", os.path.join(tempfile.gettempdir(), "treelabel-test-logs"))

import numpy as np
import pytest
import torch

from src.fusion import FusionConfig
from src.nncore.encoders import EncoderConfig, SALevelConfig
from src.skeleton import SkeletonEdge, SkeletonGraph, SkeletonNode
from src.synth import TreeSpec, generate_tree
from src.volume import LabelVolume

TINY_CLASSES = 4


def line_volume(length: int = 7, label: int = 1, pad: int = 2) -> LabelVolume:
    """A straight run of voxels along x, padded with background."""
    data = np.zeros((2 * pad + 1, 2 * pad + 1, length + 2 * pad), dtype=np.uint8)
    data[pad, pad, pad:pad + length] = label
    return LabelVolume.from_array(data)


def chain_graph(n: int = 5) -> SkeletonGraph:
    """n nodes on a straight line through the unit cube, consecutive ones joined."""
    xs = np.linspace(-0.8, 0.8, n)
    nodes = [
        SkeletonNode(id=i, voxel=(i, 0, 0), coord=(float(x), 0.0, 0.0), members=[(i, 0, 0)])
        for i, x in enumerate(xs)
    ]
    edges = [SkeletonEdge(id=i, u=i, v=i + 1, path=[]) for i in range(n - 1)]
    return SkeletonGraph(nodes, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_fusion_cfg():
    return FusionConfig(
        num_layers=2, width=8, heads=2, num_classes=TINY_CLASSES,
        ball_radius=0.3, max_ball_points=6, implicit_widths=[16, 8],
    )


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(
        point_levels=[SALevelConfig(centroid_ratio=0.25, radius=0.4, widths=[8, 8], group_size=6)],
        graph_layers=2, graph_heads=2, graph_hidden=8, out_width=8,
    )


@pytest.fixture(scope="session")
def tiny_tree():
    spec = TreeSpec(seed=3, depth=2, grid=24, num_classes=TINY_CLASSES, radius_range=(1.5, 2.0))
    return generate_tree(spec)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
