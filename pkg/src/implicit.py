# src/implicit.py
"""
Implicit Point Module and dense reconstruction.

One backbone pass caches the multi-stage point features; any coordinate is
then labeled by propagating the features of its k nearest cached points and
running the MLP head H. No backbone re-run is needed per query.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from src.fusion import FusionConfig, FusionContext, PgnOutput, PointGraphNetwork, StageFeatures, context_for_graph
from src.nncore.layers import MLP, idw_gather
from src.skeleton import SkeletonGraph, build_graph
from src.spatial import PropagationConfig, SpatialIndex, build_index, idw_weight_matrix, knn_batch
from src.utils.config import NUM_POINTS, QUERY_CHUNK
from src.utils.errors import ShapeError, VolumeFormatError
from src.utils.logger import logger
from src.utils.seeding import substream
from src.volume import CoordTransform, LabelVolume, foreground_arrays, make_transform

PathLike = Union[str, Path]


@dataclass
class FeatureCache:
    coords: np.ndarray              # M x 3
    features: torch.Tensor          # M x (D * selected stages)
    index: SpatialIndex
    stage_mask: Tuple[int, ...]

    @property
    def width(self) -> int:
        return int(self.features.shape[1])


@dataclass
class QueryBatch:
    coords: np.ndarray                      # Q x 3, normalized space
    labels: Optional[np.ndarray] = None     # optional truth, 1..C

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.coords).all():
            raise ShapeError("query coordinates must be finite")


def resolve_stage_mask(stage_mask: Optional[Iterable[int]], num_stages: int) -> Tuple[int, ...]:
    if stage_mask is None:
        return tuple(range(num_stages))
    mask = tuple(sorted(set(int(s) for s in stage_mask)))
    if not mask:
        raise ShapeError("stage mask selects no stages")
    if mask[0] < 0 or mask[-1] >= num_stages:
        raise ShapeError(f"stage mask {mask} outside 0..{num_stages - 1}")
    return mask


def build_cache(stages: StageFeatures, coords: np.ndarray,
                stage_mask: Optional[Iterable[int]] = None) -> FeatureCache:
    mask = resolve_stage_mask(stage_mask, stages.num_stages)
    features = torch.cat([stages.points[s] for s in mask], dim=-1)
    coords = np.asarray(coords, dtype=np.float64)
    if features.shape[0] != len(coords):
        raise ShapeError(f"{features.shape[0]} feature rows for {len(coords)} coordinates")
    return FeatureCache(coords=coords, features=features, index=build_index(coords), stage_mask=mask)


# ================= IMPLICIT HEAD =================

class ImplicitPointModule(nn.Module):
    def __init__(self, in_width: int, cfg: FusionConfig):
        super().__init__()
        self.k = cfg.k
        self.prop = PropagationConfig(k=cfg.k)
        self.head = MLP([in_width, *cfg.implicit_widths, cfg.num_classes], activate_last=False)

    def propagate(self, cache: FeatureCache, coords: np.ndarray) -> torch.Tensor:
        k = min(self.k, len(cache.coords))
        ids, dists = knn_batch(cache.index, coords, k)
        weights = idw_weight_matrix(dists, self.prop)
        return idw_gather(cache.features, torch.as_tensor(ids), torch.as_tensor(weights))

    def forward(self, cache: FeatureCache, coords: np.ndarray) -> torch.Tensor:
        return self.head(self.propagate(cache, coords))


def implicit_query(cache: FeatureCache, module: ImplicitPointModule, q) -> torch.Tensor:
    """C logits for one coordinate."""
    return module(cache, np.asarray(q, dtype=np.float64).reshape(1, 3))[0]


def implicit_query_batch(cache: FeatureCache, module: ImplicitPointModule, coords: np.ndarray,
                         chunk: int = QUERY_CHUNK) -> torch.Tensor:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    outs = []
    with torch.no_grad():
        for start in range(0, len(coords), chunk):
            outs.append(module(cache, coords[start:start + chunk]))
    if not outs:
        return cache.features.new_zeros((0, module.head.out_dim))
    return torch.cat(outs, dim=0)


def argmax_labels(logits: torch.Tensor) -> np.ndarray:
    """Logit column i is label i + 1; torch.argmax keeps the first column on ties."""
    return torch.argmax(logits, dim=1).cpu().numpy().astype(np.int64) + 1


# ================= FULL MODEL =================

class IPGN(nn.Module):
    def __init__(self, pgn: PointGraphNetwork, stage_mask: Optional[Sequence[int]] = None):
        super().__init__()
        self.pgn = pgn
        self.cfg = pgn.cfg
        self.stage_mask = resolve_stage_mask(stage_mask, pgn.cfg.num_layers + 1)
        self.implicit = ImplicitPointModule(pgn.cfg.width * len(self.stage_mask), pgn.cfg)

    @property
    def backbone_calls(self) -> int:
        return self.pgn.backbone_calls

    def reset_counters(self) -> None:
        self.pgn.backbone_calls = 0

    def context(self, point_coords: np.ndarray, graph: SkeletonGraph,
                node_coords: Optional[np.ndarray] = None) -> FusionContext:
        return context_for_graph(point_coords, graph, self.cfg, self.pgn.point_encoder, node_coords)

    def forward(self, ctx: FusionContext, implicit_coords: Optional[np.ndarray] = None):
        out = self.pgn(ctx)
        cache = build_cache(out.stages, ctx.point_coords, self.stage_mask)
        implicit_logits = None
        if implicit_coords is not None and len(implicit_coords):
            implicit_logits = self.implicit(cache, implicit_coords)
        return out, cache, implicit_logits


# ================= RECONSTRUCTION =================

@dataclass
class PreparedVolume:
    transform: CoordTransform
    voxels: np.ndarray              # F x 3 (x, y, z)
    coords: np.ndarray              # F x 3 normalized
    labels: np.ndarray              # F, volume labels (0/1 for binary input)
    graph: SkeletonGraph


def prepare_volume(vol: LabelVolume, graph: Optional[SkeletonGraph] = None) -> PreparedVolume:
    voxels, labels = foreground_arrays(vol)
    if len(voxels) == 0:
        raise VolumeFormatError("cannot reconstruct a volume with empty foreground")
    transform = graph.transform if graph is not None and graph.transform is not None else make_transform(vol)
    if graph is None:
        graph = build_graph(vol, transform, labeled=False)
    return PreparedVolume(transform, voxels, transform.to_normalized(voxels), labels, graph)


def sample_points(count: int, num_points: int, seed: int, stream: str = "reconstruct") -> np.ndarray:
    if count <= num_points:
        return np.arange(count)
    rng = substream(seed, stream)
    return np.sort(rng.choice(count, size=num_points, replace=False))


def _paint(vol: LabelVolume, voxels: np.ndarray, labels: np.ndarray) -> LabelVolume:
    data = np.zeros_like(vol.data)
    data[voxels[:, 2], voxels[:, 1], voxels[:, 0]] = labels.astype(np.uint8)
    return LabelVolume(vol.dims, vol.spacing, data, max(vol.num_classes, int(labels.max(initial=0))))


def encode_cache(model: IPGN, prepared: PreparedVolume, num_points: int = NUM_POINTS,
                 seed: int = 0) -> Tuple[FeatureCache, PgnOutput, np.ndarray]:
    """The single backbone pass behind implicit reconstruction and free-space labeling."""
    picked = sample_points(len(prepared.coords), num_points, seed)
    ctx = model.context(prepared.coords[picked], prepared.graph)
    with torch.no_grad():
        out, cache, _ = model(ctx)
    return cache, out, picked


def reconstruct_dense(vol: LabelVolume, model: IPGN, graph: Optional[SkeletonGraph] = None,
                      num_points: int = NUM_POINTS, seed: int = 0,
                      chunk: int = QUERY_CHUNK) -> LabelVolume:
    model.eval()
    prepared = prepare_volume(vol, graph)
    cache, _, _ = encode_cache(model, prepared, num_points, seed)
    logits = implicit_query_batch(cache, model.implicit, prepared.coords, chunk)
    labels = argmax_labels(logits)
    logger.success(
        f"Implicit reconstruction: {len(labels)} voxels labeled with {model.backbone_calls} backbone pass(es) so far"
    )
    return _paint(vol, prepared.voxels, labels)


def repeated_inference_reconstruct(vol: LabelVolume, model: IPGN, graph: Optional[SkeletonGraph] = None,
                                   num_points: int = NUM_POINTS, seed: int = 0) -> LabelVolume:
    """
    Baseline: run the full backbone on disjoint groups of num_points
    foreground points. A short last group is padded with points already
    covered by earlier groups; their predictions are discarded.
    """
    model.eval()
    prepared = prepare_volume(vol, graph)
    total = len(prepared.coords)
    order = substream(seed, "repeated").permutation(total)
    groups = [order[i:i + num_points] for i in range(0, total, num_points)]

    labels = np.zeros(total, dtype=np.int64)
    for gi, group in enumerate(groups):
        members = group
        if len(group) < num_points and len(groups) > 1:
            pad = order[: num_points - len(group)]
            members = np.concatenate([group, pad])
        ctx = model.context(prepared.coords[members], prepared.graph)
        with torch.no_grad():
            out = model.pgn(ctx)
        labels[group] = argmax_labels(out.point_logits)[: len(group)]
        logger.debug(f"Repeated inference group {gi + 1}/{len(groups)} size={len(group)}")

    logger.success(f"Repeated-inference reconstruction: {len(groups)} backbone passes for {total} voxels")
    return _paint(vol, prepared.voxels, labels)


def backbone_passes(foreground: int, num_points: int = NUM_POINTS) -> int:
    return -(-foreground // num_points)


# ================= FREE SPACE =================

def label_freespace(queries: QueryBatch, model: IPGN, cache: FeatureCache,
                    chunk: int = QUERY_CHUNK) -> np.ndarray:
    """Labels 1..C for arbitrary coordinates; no on-structure restriction."""
    logits = implicit_query_batch(cache, model.implicit, queries.coords, chunk)
    return argmax_labels(logits)


def label_lattice(vol: LabelVolume, model: IPGN, graph: Optional[SkeletonGraph] = None,
                  step: int = 1, num_points: int = NUM_POINTS, seed: int = 0) -> LabelVolume:
    """
    Label every lattice voxel (every step-th voxel per axis) inside the
    foreground bounding box, on or off the structure.
    """
    model.eval()
    prepared = prepare_volume(vol, graph)
    cache, _, _ = encode_cache(model, prepared, num_points, seed)

    lo = prepared.voxels.min(axis=0)
    hi = prepared.voxels.max(axis=0)
    axes = [np.arange(lo[a], hi[a] + 1, step) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    lattice = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    labels = label_freespace(QueryBatch(prepared.transform.to_normalized(lattice)), model, cache)
    logger.success(f"Free-space lattice: {len(lattice)} cells labeled")
    return _paint(vol, lattice, labels)


# ================= EXPORTS =================

PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128),
]


def export_ply(vol: LabelVolume, path: PathLike) -> Path:
    """ASCII PLY, one colored vertex per foreground voxel."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    voxels, labels = foreground_arrays(vol)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(voxels)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property uchar label",
        "end_header",
    ]
    for (x, y, z), label in zip(voxels, labels):
        r, g, b = PALETTE[int(label) % len(PALETTE)]
        lines.append(f"{x} {y} {z} {r} {g} {b} {int(label)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def export_csv(pred: LabelVolume, truth: Optional[LabelVolume], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    voxels, pred_labels = foreground_arrays(pred)
    true_labels = (
        truth.data[voxels[:, 2], voxels[:, 1], voxels[:, 0]].astype(np.int64)
        if truth is not None else np.zeros(len(voxels), dtype=np.int64)
    )
    df = pd.DataFrame({
        "x": voxels[:, 0],
        "y": voxels[:, 1],
        "z": voxels[:, 2],
        "true": true_labels,
        "pred": pred_labels,
    })
    df.to_csv(path, index=False)
    return path
