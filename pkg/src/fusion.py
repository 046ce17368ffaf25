# src/fusion.py
"""
Point-Graph Network backbone.

Each fusion layer reads the previous stage of both branches:
    nodes  <- GAT([maxpool_{p in ball(g)} F1(p), g])        point -> graph
    points <- F2([idw_{k nearest nodes}(G), p])              graph -> point
"""

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.nncore.encoders import GraphEncoder, PointEncoder, PointGeometry, edge_mean
from src.nncore.layers import MLP, GATLayer, glorot_linear, grouped_max_pool, idw_gather
from src.skeleton import SkeletonGraph
from src.spatial import (
    PropagationConfig,
    ball_query_batch,
    build_index,
    idw_weight_matrix,
    knn_batch,
)
from src.utils.config import (
    BALL_RADIUS,
    DESK_NUM_CLASSES,
    FEATURE_WIDTH,
    FUSION_LAYERS,
    GAT_HEADS,
    MAX_BALL_POINTS,
    PROPAGATION_K,
)
from src.utils.errors import ShapeError
from src.utils.logger import logger


@dataclass
class FusionConfig:
    num_layers: int = FUSION_LAYERS
    width: int = FEATURE_WIDTH
    ball_radius: float = BALL_RADIUS
    max_ball_points: int = MAX_BALL_POINTS
    k: int = PROPAGATION_K
    num_classes: int = DESK_NUM_CLASSES
    heads: int = GAT_HEADS
    implicit_widths: List[int] = field(default_factory=lambda: [256, 128])

    def __post_init__(self):
        if self.num_layers < 1:
            raise ShapeError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by {self.heads} heads")
        if not self.ball_radius > 0 or self.max_ball_points < 1 or self.k < 1:
            raise ShapeError("ball radius, max ball points and k must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageFeatures:
    points: List[torch.Tensor]      # P^(0..l), each M x D
    nodes: List[torch.Tensor]       # G^(0..l), each N x D

    @property
    def num_stages(self) -> int:
        return len(self.points)


@dataclass
class PgnOutput:
    point_logits: torch.Tensor      # M x C
    node_logits: torch.Tensor       # N x C
    edge_logits: torch.Tensor       # E x C
    stages: StageFeatures


# ================= NEIGHBORHOOD PLAN =================

@dataclass
class FusionContext:
    """Coordinate-only precomputation for one point cloud + graph pair."""
    point_coords: np.ndarray        # M x 3
    node_coords: np.ndarray         # N x 3
    adj: torch.Tensor               # N x N bool, self-loops included
    edges: torch.Tensor             # E x 2 long
    ball_ids: np.ndarray            # N x K, padded with the nearest member
    node_ids: np.ndarray            # M x k nearest nodes
    node_weights: np.ndarray        # M x k idw weights
    point_geometry: Optional[PointGeometry] = None
    empty_balls: int = 0

    @property
    def num_points(self) -> int:
        return len(self.point_coords)

    @property
    def num_nodes(self) -> int:
        return len(self.node_coords)


def plan_ball_groups(point_coords: np.ndarray, node_coords: np.ndarray, radius: float,
                     max_count: int):
    """N x max_count point ids per node; empty balls fall back to the nearest point."""
    index = build_index(point_coords)
    groups = ball_query_batch(index, node_coords, radius, max_count)
    out = np.empty((len(groups), max_count), dtype=np.int64)
    empty = 0
    for i, g in enumerate(groups):
        if len(g) == 0:
            ids, _ = knn_batch(index, node_coords[i:i + 1], 1)
            g = ids[0]
            empty += 1
        out[i, :len(g)] = g
        out[i, len(g):] = g[0]
    return out, empty


def plan_node_propagation(point_coords: np.ndarray, node_coords: np.ndarray, k: int,
                          prop: Optional[PropagationConfig] = None):
    if len(node_coords) < k:
        logger.warning(f"Only {len(node_coords)} graph nodes for k={k}; using k={len(node_coords)}")
        k = len(node_coords)
    prop = prop or PropagationConfig(k=k)
    ids, dists = knn_batch(build_index(node_coords), point_coords, k)
    return ids, idw_weight_matrix(dists, prop)


def build_context(point_coords: np.ndarray, node_coords: np.ndarray, adj: np.ndarray,
                  edges: np.ndarray, cfg: FusionConfig,
                  point_encoder: Optional[PointEncoder] = None) -> FusionContext:
    point_coords = np.asarray(point_coords, dtype=np.float64)
    node_coords = np.asarray(node_coords, dtype=np.float64)
    if len(point_coords) == 0 or len(node_coords) == 0:
        raise ShapeError(
            f"fusion needs points and nodes, got M={len(point_coords)} N={len(node_coords)}"
        )

    ball_ids, empty = plan_ball_groups(point_coords, node_coords, cfg.ball_radius, cfg.max_ball_points)
    if empty:
        logger.warning(f"{empty}/{len(node_coords)} nodes had an empty ball; used nearest point")
    node_ids, node_weights = plan_node_propagation(point_coords, node_coords, cfg.k)
    geometry = point_encoder.geometry(point_coords) if point_encoder is not None else None

    return FusionContext(
        point_coords=point_coords,
        node_coords=node_coords,
        adj=torch.as_tensor(np.asarray(adj, dtype=bool)),
        edges=torch.as_tensor(np.asarray(edges, dtype=np.int64).reshape(-1, 2)),
        ball_ids=ball_ids,
        node_ids=node_ids,
        node_weights=node_weights,
        point_geometry=geometry,
        empty_balls=empty,
    )


def context_for_graph(point_coords: np.ndarray, graph: SkeletonGraph, cfg: FusionConfig,
                      point_encoder: Optional[PointEncoder] = None,
                      node_coords: Optional[np.ndarray] = None) -> FusionContext:
    """node_coords overrides the graph's stored coordinates (augmented copies)."""
    nodes = graph.node_coords() if node_coords is None else node_coords
    return build_context(point_coords, nodes, graph.adjacency_matrix(True), graph.edge_array(),
                         cfg, point_encoder)


# ================= FUSION LAYER =================

class PointGraphFusionLayer(nn.Module):
    def __init__(self, width: int, heads: int = GAT_HEADS):
        super().__init__()
        self.f1 = MLP([width, width])
        self.gnn = GATLayer(2 * width, width, heads=heads)
        self.f2 = MLP([2 * width, width])

    def ball_pool(self, P_prev: torch.Tensor, ball_ids: np.ndarray) -> torch.Tensor:
        """Max over in-ball points of the projected point features."""
        projected = self.f1(P_prev)
        return grouped_max_pool(projected[torch.as_tensor(ball_ids, dtype=torch.long)])

    def point_to_graph(self, P_prev: torch.Tensor, G_prev: torch.Tensor, ctx: FusionContext) -> torch.Tensor:
        pooled = self.ball_pool(P_prev, ctx.ball_ids)
        return F.relu(self.gnn(torch.cat([pooled, G_prev], dim=-1), ctx.adj))

    def graph_to_point(self, P_prev: torch.Tensor, G_prev: torch.Tensor, ctx: FusionContext) -> torch.Tensor:
        spread = idw_gather(G_prev, torch.as_tensor(ctx.node_ids), torch.as_tensor(ctx.node_weights))
        return self.f2(torch.cat([spread, P_prev], dim=-1))

    def forward(self, P_prev: torch.Tensor, G_prev: torch.Tensor, ctx: FusionContext):
        # both directions read the previous stage only
        G_next = self.point_to_graph(P_prev, G_prev, ctx)
        P_next = self.graph_to_point(P_prev, G_prev, ctx)
        return P_next, G_next


def point_to_graph_fuse(layer: PointGraphFusionLayer, P_prev, G_prev, ctx: FusionContext):
    return layer.point_to_graph(P_prev, G_prev, ctx)


def graph_to_point_fuse(layer: PointGraphFusionLayer, P_prev, G_prev, ctx: FusionContext):
    return layer.graph_to_point(P_prev, G_prev, ctx)


def edge_logits(node_feats: torch.Tensor, edges: torch.Tensor, head: MLP) -> torch.Tensor:
    return head(edge_mean(node_feats, edges))


# ================= BACKBONE =================

class PointGraphNetwork(nn.Module):
    def __init__(self, cfg: FusionConfig, point_encoder: PointEncoder, graph_encoder: GraphEncoder):
        super().__init__()
        if point_encoder.cfg.out_width != cfg.width or graph_encoder.cfg.out_width != cfg.width:
            raise ShapeError(
                f"encoder widths ({point_encoder.cfg.out_width}, {graph_encoder.cfg.out_width}) "
                f"must equal fusion width {cfg.width}"
            )
        self.cfg = cfg
        self.point_encoder = point_encoder
        self.graph_encoder = graph_encoder
        self.layers = nn.ModuleList(PointGraphFusionLayer(cfg.width, cfg.heads) for _ in range(cfg.num_layers))
        self.point_head = MLP([cfg.width, cfg.width, cfg.num_classes], activate_last=False)
        self.node_gnn = GATLayer(cfg.width, cfg.width, heads=cfg.heads)
        self.node_out = glorot_linear(cfg.width, cfg.num_classes)
        self.edge_head = MLP([cfg.width, cfg.width, cfg.num_classes], activate_last=False)
        self.backbone_calls = 0

    @property
    def encoders_trainable(self) -> bool:
        return any(
            p.requires_grad
            for m in (self.point_encoder, self.graph_encoder)
            for p in m.parameters()
        )

    def freeze_encoders(self) -> None:
        for m in (self.point_encoder, self.graph_encoder):
            for p in m.parameters():
                p.requires_grad_(False)

    def unfreeze_encoders(self) -> None:
        for m in (self.point_encoder, self.graph_encoder):
            for p in m.parameters():
                p.requires_grad_(True)

    def forward(self, ctx: FusionContext) -> PgnOutput:
        self.backbone_calls += 1
        dtype = self.node_out.weight.dtype
        points = torch.as_tensor(ctx.point_coords, dtype=dtype)
        nodes = torch.as_tensor(ctx.node_coords, dtype=dtype)

        with torch.set_grad_enabled(torch.is_grad_enabled() and self.encoders_trainable):
            P = self.point_encoder(points, ctx.point_geometry)
            G = self.graph_encoder(nodes, ctx.adj)

        stages = StageFeatures(points=[P], nodes=[G])
        for layer in self.layers:
            P, G = layer(P, G, ctx)
            stages.points.append(P)
            stages.nodes.append(G)

        node_hidden = F.relu(self.node_gnn(G, ctx.adj))
        return PgnOutput(
            point_logits=self.point_head(P),
            node_logits=self.node_out(node_hidden),
            edge_logits=edge_logits(G, ctx.edges, self.edge_head),
            stages=stages,
        )


def pgn_forward(model: PointGraphNetwork, ctx: FusionContext) -> PgnOutput:
    return model(ctx)
