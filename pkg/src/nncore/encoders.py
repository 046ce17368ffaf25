# src/nncore/encoders.py
"""
Point encoder (set abstraction + feature propagation) and graph encoder
(stacked graph attention), plus the segmentation wrappers used to pre-train
them on their own tasks.
"""

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.nncore.layers import MLP, GATLayer, glorot_linear, grouped_max_pool, idw_gather
from src.spatial import (
    PropagationConfig,
    ball_query_batch,
    build_index,
    idw_weight_matrix,
    knn_batch,
)
from src.utils.config import DESK_NUM_CLASSES, FEATURE_WIDTH, GAT_HEADS, GAT_LAYERS, PROPAGATION_K
from src.utils.errors import ShapeError


@dataclass
class SALevelConfig:
    centroid_ratio: float               # centroids = M * ratio, M = input point count
    radius: float
    widths: List[int]
    group_size: int = 32
    num_centroids: Optional[int] = None  # fixed count overrides the ratio

    def centroids_for(self, m: int, available: Optional[int] = None) -> int:
        """Centroid count for an M-point cloud, drawn from `available` points of the previous level."""
        available = m if available is None else available
        if self.num_centroids is not None:
            if available < self.num_centroids:
                raise ShapeError(f"{available} points but level needs {self.num_centroids} centroids")
            return self.num_centroids
        return min(available, max(1, int(m * self.centroid_ratio)))


def default_levels() -> List[SALevelConfig]:
    return [
        SALevelConfig(centroid_ratio=1 / 8, radius=0.1, widths=[32, 64]),
        SALevelConfig(centroid_ratio=1 / 32, radius=0.2, widths=[64, 128]),
    ]


@dataclass
class EncoderConfig:
    point_levels: List[SALevelConfig] = field(default_factory=default_levels)
    graph_layers: int = GAT_LAYERS
    graph_heads: int = GAT_HEADS
    graph_hidden: int = FEATURE_WIDTH
    graph_residual: bool = True
    out_width: int = FEATURE_WIDTH

    def __post_init__(self):
        self.point_levels = [
            lvl if isinstance(lvl, SALevelConfig) else SALevelConfig(**lvl)
            for lvl in self.point_levels
        ]
        if not self.point_levels:
            raise ShapeError("point encoder needs at least one set-abstraction level")
        if self.graph_layers < 1:
            raise ShapeError("graph encoder needs at least one layer")

    def to_dict(self) -> dict:
        return asdict(self)


# ================= SAMPLING =================

def farthest_point_sample(coords: np.ndarray, count: int) -> np.ndarray:
    """
    Deterministic FPS. Starts at the lexicographically smallest coordinate
    (smallest id among duplicates); later ties go to the smallest id.
    """
    coords = np.asarray(coords, dtype=np.float64)
    m = len(coords)
    if count > m:
        raise ShapeError(f"cannot sample {count} centroids from {m} points")
    start = int(np.lexsort((np.arange(m), coords[:, 2], coords[:, 1], coords[:, 0]))[0])

    chosen = np.empty(count, dtype=np.int64)
    nearest = np.full(m, np.inf)
    current = start
    for i in range(count):
        chosen[i] = current
        d = np.sum((coords - coords[current]) ** 2, axis=1)
        np.minimum(nearest, d, out=nearest)
        current = int(np.argmax(nearest))
    return chosen


@dataclass
class LevelGeometry:
    centroid_ids: np.ndarray     # S, ids into the previous level's points
    groups: np.ndarray           # S x K, ids into the previous level's points


@dataclass
class PointGeometry:
    levels: List[LevelGeometry]
    up_ids: List[np.ndarray]     # per level (coarse -> fine) Q x k neighbor ids
    up_weights: List[np.ndarray]


def _pad_groups(groups: List[np.ndarray], size: int) -> np.ndarray:
    out = np.empty((len(groups), size), dtype=np.int64)
    for i, g in enumerate(groups):
        # repeat the nearest member; max pooling is idempotent under duplicates
        out[i, :len(g)] = g
        out[i, len(g):] = g[0]
    return out


def _upsample_plan(coarse: np.ndarray, fine: np.ndarray, k: int, prop: PropagationConfig):
    index = build_index(coarse)
    k = min(k, len(coarse))
    ids, dists = knn_batch(index, fine, k)
    return ids, idw_weight_matrix(dists, prop)


# ================= POINT ENCODER =================

class PointEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.prop = PropagationConfig(k=PROPAGATION_K)

        sa = []
        in_feat = 0
        level_widths = []
        for lvl in cfg.point_levels:
            sa.append(MLP([3 + in_feat, *lvl.widths]))
            in_feat = lvl.widths[-1]
            level_widths.append(in_feat)
        self.sa = nn.ModuleList(sa)

        # propagation back up: coarsest level first
        fp = []
        carried = level_widths[-1]
        for skip in reversed(level_widths[:-1]):
            fp.append(MLP([carried + skip, cfg.out_width]))
            carried = cfg.out_width
        self.fp = nn.ModuleList(fp)
        self.final = MLP([carried + 3, cfg.out_width, cfg.out_width])

    def geometry(self, coords: np.ndarray) -> PointGeometry:
        coords = np.asarray(coords, dtype=np.float64)
        levels = []
        level_coords = [coords]
        current = coords
        for lvl in self.cfg.point_levels:
            count = lvl.centroids_for(len(coords), len(current))
            centroid_ids = farthest_point_sample(current, count)
            centers = current[centroid_ids]
            groups = ball_query_batch(build_index(current), centers, lvl.radius, lvl.group_size)
            levels.append(LevelGeometry(centroid_ids, _pad_groups(groups, lvl.group_size)))
            current = centers
            level_coords.append(current)

        up_ids, up_weights = [], []
        for coarse, fine in zip(reversed(level_coords[1:]), reversed(level_coords[:-1])):
            ids, w = _upsample_plan(coarse, fine, self.prop.k, self.prop)
            up_ids.append(ids)
            up_weights.append(w)
        return PointGeometry(levels, up_ids, up_weights)

    def forward(self, coords: torch.Tensor, geometry: Optional[PointGeometry] = None) -> torch.Tensor:
        if coords.dim() != 2 or coords.shape[1] != 3:
            raise ShapeError(f"point encoder expects M x 3 coordinates, got {tuple(coords.shape)}")
        if geometry is None:
            geometry = self.geometry(coords.detach().cpu().numpy())

        xyz = coords
        feats = None
        skips = []
        for mlp, lvl in zip(self.sa, geometry.levels):
            groups = torch.as_tensor(lvl.groups, dtype=torch.long)
            centers = xyz[torch.as_tensor(lvl.centroid_ids, dtype=torch.long)]
            rel = xyz[groups] - centers.unsqueeze(1)                    # S x K x 3
            grouped = rel if feats is None else torch.cat([rel, feats[groups]], dim=-1)
            feats = grouped_max_pool(mlp(grouped))                      # S x W
            xyz = centers
            skips.append(feats)

        carried = skips[-1]
        for mlp, skip, ids, w in zip(self.fp, reversed(skips[:-1]), geometry.up_ids, geometry.up_weights):
            up = idw_gather(carried, torch.as_tensor(ids), torch.as_tensor(w))
            carried = mlp(torch.cat([up, skip], dim=-1))

        up = idw_gather(carried, torch.as_tensor(geometry.up_ids[-1]), torch.as_tensor(geometry.up_weights[-1]))
        return self.final(torch.cat([up, coords], dim=-1))


# ================= GRAPH ENCODER =================

class GraphEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dims = [3] + [cfg.graph_hidden] * (cfg.graph_layers - 1) + [cfg.out_width]
        self.layers = nn.ModuleList(
            GATLayer(a, b, heads=cfg.graph_heads) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, node_coords: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        x = node_coords
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(x, adj)
            if self.cfg.graph_residual and h.shape == x.shape:
                h = h + x
            x = F.relu(h) if i < last else h
        return x


# ================= PRE-TRAINING WRAPPERS =================

def edge_mean(node_feats: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """Per-edge average of the two endpoint features."""
    n = node_feats.shape[0]
    if edges.numel() == 0:
        return node_feats.new_zeros((0, node_feats.shape[1]))
    if int(edges.min()) < 0 or int(edges.max()) >= n:
        raise ShapeError(f"edge endpoint outside [0, {n})")
    return 0.5 * (node_feats[edges[:, 0]] + node_feats[edges[:, 1]])


class PointSegmenter(nn.Module):
    def __init__(self, cfg: EncoderConfig, num_classes: int = DESK_NUM_CLASSES):
        super().__init__()
        self.encoder = PointEncoder(cfg)
        self.head = glorot_linear(cfg.out_width, num_classes)

    def forward(self, coords: torch.Tensor, geometry: Optional[PointGeometry] = None) -> torch.Tensor:
        return self.head(self.encoder(coords, geometry))


class GraphSegmenter(nn.Module):
    def __init__(self, cfg: EncoderConfig, num_classes: int = DESK_NUM_CLASSES):
        super().__init__()
        self.encoder = GraphEncoder(cfg)
        self.node_head = glorot_linear(cfg.out_width, num_classes)
        self.edge_head = MLP([cfg.out_width, cfg.out_width, num_classes], activate_last=False)

    def forward(self, node_coords: torch.Tensor, adj: torch.Tensor, edges: torch.Tensor):
        feats = self.encoder(node_coords, adj)
        return self.node_head(feats), self.edge_head(edge_mean(feats, edges))
