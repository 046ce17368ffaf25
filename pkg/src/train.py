# src/train.py
"""
Two-phase training.

Phase 1 pre-trains the point encoder (per-point labels) and the graph
encoder (node + edge labels) on their own segmentation tasks. Phase 2
freezes both and trains the fusion layers, the heads and the implicit
module jointly, one tree per step.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.evalbench import accuracy
from src.fusion import FusionConfig, FusionContext, PointGraphNetwork
from src.implicit import IPGN
from src.nncore.checkpoint import load_into, read_checkpoint, save_checkpoint
from src.nncore.encoders import EncoderConfig, GraphEncoder, GraphSegmenter, PointEncoder, PointSegmenter
from src.nncore.layers import cross_entropy
from src.nncore.store import ParameterStore, adam_step, backward
from src.skeleton import SkeletonGraph, load_graph
from src.synth import DatasetManifest, TreeRecord
from src.utils.config import NUM_IMPLICIT_POINTS, NUM_POINTS
from src.utils.errors import CheckpointError, ConfigError, ShapeError, TrainingDivergedError
from src.utils.logger import logger
from src.utils.seeding import seed_torch, substream
from src.volume import LabelVolume, foreground_arrays, load_volume

PathLike = Union[str, Path]


@dataclass
class TrainConfig:
    point_epochs: int = 120
    point_lr: float = 0.002
    graph_epochs: int = 240
    graph_lr: float = 0.02
    joint_epochs: int = 100
    joint_lr: float = 0.01
    lr_halving: int = 45
    num_points: int = NUM_POINTS
    num_implicit_points: int = NUM_IMPLICIT_POINTS
    rotation_deg: float = 180.0
    shift: float = 0.1
    scale_range: Tuple[float, float] = (0.9, 1.1)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    stage_mask: Optional[List[int]] = None
    fine_tune_encoders: bool = False

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        bad = []
        for name in ("point_epochs", "graph_epochs", "joint_epochs"):
            if getattr(self, name) < 0:
                bad.append(f"{name}={getattr(self, name)}")
        for name in ("point_lr", "graph_lr", "joint_lr", "adam_eps"):
            if getattr(self, name) < 0:
                bad.append(f"{name}={getattr(self, name)}")
        if self.lr_halving < 1:
            bad.append(f"lr_halving={self.lr_halving}")
        if self.num_points < 1:
            bad.append(f"num_points={self.num_points}")
        if self.num_implicit_points < 0:
            bad.append(f"num_implicit_points={self.num_implicit_points}")
        if self.rotation_deg < 0 or self.shift < 0:
            bad.append("augmentation ranges must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            bad.append(f"scale_range={self.scale_range}")
        if bad:
            raise ConfigError(f"Invalid training config: {', '.join(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["betas"] = list(self.betas)
        return d


def lr_at(base_lr: float, epoch: int, halving: int = 45) -> float:
    """epoch is 1-based: epochs 1..halving use base_lr, the next block half of it."""
    return base_lr * 0.5 ** ((epoch - 1) // halving)


# ================= AUGMENTATION =================

@dataclass(frozen=True)
class AugmentParams:
    angle: float                        # radians about the vertical (z) axis
    shift: Tuple[float, float, float]
    scale: float

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        return self.scale * (coords @ self.matrix().T) + np.asarray(self.shift)


def sample_augmentation(rng: np.random.Generator, cfg: TrainConfig) -> AugmentParams:
    angle = np.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shift = tuple(float(v) for v in rng.uniform(-cfg.shift, cfg.shift, size=3))
    scale = float(rng.uniform(*cfg.scale_range))
    return AugmentParams(float(angle), shift, scale)


def augment(points: np.ndarray, node_coords: np.ndarray, seed: int,
            cfg: Optional[TrainConfig] = None, *stream: int) -> Tuple[np.ndarray, np.ndarray, AugmentParams]:
    """The same rotation, shift and scale applied to points and graph nodes."""
    cfg = cfg or TrainConfig()
    params = sample_augmentation(substream(seed, "augment", *stream), cfg)
    return params.apply(points), params.apply(node_coords), params


# ================= SAMPLES =================

@dataclass
class TreeSample:
    id: int
    volume: LabelVolume
    graph: SkeletonGraph
    coords: np.ndarray                  # F x 3 normalized foreground coordinates
    labels: np.ndarray                  # F, 1..C

    @property
    def foreground(self) -> int:
        return len(self.coords)


def load_sample(record: TreeRecord) -> TreeSample:
    vol = load_volume(record.volume)
    graph = load_graph(record.graph)
    if graph.transform is None:
        raise CheckpointError(f"graph {record.graph} carries no coordinate transform")
    voxels, labels = foreground_arrays(vol)
    return TreeSample(record.id, vol, graph, graph.transform.to_normalized(voxels), labels)


def load_split(manifest: DatasetManifest, part: str) -> List[TreeSample]:
    return [load_sample(r) for r in manifest.records(part)]


@dataclass
class TrainBatch:
    points: np.ndarray
    point_labels: np.ndarray            # 0-based class indices
    node_coords: np.ndarray
    node_labels: np.ndarray
    edge_labels: np.ndarray
    graph: SkeletonGraph
    implicit_coords: np.ndarray
    implicit_labels: np.ndarray


def _pick(rng: np.random.Generator, total: int, count: int) -> np.ndarray:
    if count >= total:
        return np.arange(total)
    return np.sort(rng.choice(total, size=count, replace=False))


def make_batch(sample: TreeSample, cfg: TrainConfig, epoch: int, augmented: bool = True,
               stream: str = "train-sample") -> TrainBatch:
    rng = substream(cfg.seed, stream, epoch, sample.id)
    picked = _pick(rng, sample.foreground, cfg.num_points)
    fresh = _pick(rng, sample.foreground, cfg.num_implicit_points) if cfg.num_implicit_points else np.zeros(0, np.int64)

    points = sample.coords[picked]
    nodes = sample.graph.node_coords()
    implicit = sample.coords[fresh]
    if augmented:
        points, nodes, params = augment(points, nodes, cfg.seed, cfg, epoch, sample.id)
        implicit = params.apply(implicit)

    return TrainBatch(
        points=points,
        point_labels=sample.labels[picked] - 1,
        node_coords=nodes,
        node_labels=sample.graph.node_labels() - 1,
        edge_labels=sample.graph.edge_labels() - 1,
        graph=sample.graph,
        implicit_coords=implicit,
        implicit_labels=sample.labels[fresh] - 1,
    )


def _epoch_order(n: int, seed: int, name: str, epoch: int) -> np.ndarray:
    return substream(seed, name, epoch).permutation(n)


def _check_finite(loss: torch.Tensor, report: dict) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        logger.error(f"Non-finite loss: {report}")
        raise TrainingDivergedError(f"loss became {value} at {report}", {**report, "loss": value})
    return value


def _labels(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(arr, dtype=torch.long)


def _write_log(rows: List[dict], path: Optional[Path]) -> None:
    if path is not None and rows:
        pd.DataFrame(rows).to_csv(path, index=False)


# ================= PHASE 1: ENCODERS =================

@dataclass
class EncoderCheckpoints:
    point: Path
    graph: Path


def _train_loop(name: str, model: torch.nn.Module, samples: List[TreeSample], epochs: int, base_lr: float,
                cfg: TrainConfig, step: Callable[[TrainBatch], Tuple[torch.Tensor, float]],
                log_path: Optional[Path]) -> List[dict]:
    store = ParameterStore(model)
    rows = []
    for epoch in range(1, epochs + 1):
        lr = lr_at(base_lr, epoch, cfg.lr_halving)
        losses, accs = [], []
        for i in _epoch_order(len(samples), cfg.seed, f"{name}-order", epoch):
            sample = samples[int(i)]
            batch = make_batch(sample, cfg, epoch, stream=f"{name}-sample")
            store.zero_grad()
            loss, acc = step(batch)
            losses.append(_check_finite(loss, {"phase": name, "epoch": epoch, "tree": sample.id, "lr": lr}))
            accs.append(acc)
            backward(loss, store)
            adam_step(store, lr, cfg.betas, cfg.adam_eps)
        rows.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "train_acc": float(np.mean(accs))})
        logger.info(f"[{name}] epoch={epoch}/{epochs} lr={lr:.5f} loss={rows[-1]['train_loss']:.4f} acc={rows[-1]['train_acc']:.2f}")
        _write_log(rows, log_path)
    return rows


def train_encoders(manifest: DatasetManifest, cfg: TrainConfig, enc_cfg: EncoderConfig, num_classes: int,
                   out_dir: PathLike) -> EncoderCheckpoints:
    """Pre-train both encoders; their segmentation heads stay in the checkpoints for the baselines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_split(manifest, "train")
    config = {"encoder": enc_cfg.to_dict(), "num_classes": num_classes, "train": cfg.to_dict()}

    seed_torch(cfg.seed, "init-point-encoder")
    point_model = PointSegmenter(enc_cfg, num_classes)

    def point_step(batch: TrainBatch):
        logits = point_model(torch.as_tensor(batch.points, dtype=torch.float32))
        labels = _labels(batch.point_labels)
        acc = accuracy(logits.argmax(1).numpy() + 1, labels.numpy() + 1)
        return cross_entropy(logits, labels), acc

    _train_loop("point", point_model, samples, cfg.point_epochs, cfg.point_lr, cfg, point_step,
                out_dir / "point_encoder_log.csv")
    point_path = save_checkpoint(point_model, out_dir / "point_encoder.json", {**config, "kind": "point_encoder"})

    seed_torch(cfg.seed, "init-graph-encoder")
    graph_model = GraphSegmenter(enc_cfg, num_classes)

    def graph_step(batch: TrainBatch):
        adj = torch.as_tensor(batch.graph.adjacency_matrix(True))
        edges = torch.as_tensor(batch.graph.edge_array())
        node_logits, edge_logits = graph_model(torch.as_tensor(batch.node_coords, dtype=torch.float32), adj, edges)
        loss = cross_entropy(node_logits, _labels(batch.node_labels))
        if len(batch.edge_labels):
            loss = loss + cross_entropy(edge_logits, _labels(batch.edge_labels))
        acc = accuracy(node_logits.argmax(1).numpy() + 1, batch.node_labels + 1)
        return loss, acc

    _train_loop("graph", graph_model, samples, cfg.graph_epochs, cfg.graph_lr, cfg, graph_step,
                out_dir / "graph_encoder_log.csv")
    graph_path = save_checkpoint(graph_model, out_dir / "graph_encoder.json", {**config, "kind": "graph_encoder"})
    return EncoderCheckpoints(point_path, graph_path)


def _stored_config(path: PathLike) -> dict:
    _, config = read_checkpoint(path)
    if not isinstance(config, dict):
        raise CheckpointError(f"{path} carries no model config")
    return config


def load_segmenter(path: PathLike):
    config = _stored_config(path)
    kind = config.get("kind")
    if kind not in ("point_encoder", "graph_encoder"):
        raise CheckpointError(f"{path} is not an encoder checkpoint (kind={kind!r})")
    try:
        enc_cfg = EncoderConfig(**config["encoder"])
        cls = PointSegmenter if kind == "point_encoder" else GraphSegmenter
        model = cls(enc_cfg, int(config["num_classes"]))
    except (KeyError, TypeError, ValueError, ShapeError) as e:
        raise CheckpointError(f"bad model config in {path}: {e!r}") from e
    load_into(model, path)
    return model


# ================= PHASE 2: JOINT =================

def build_ipgn(fusion_cfg: FusionConfig, enc_cfg: EncoderConfig, stage_mask: Optional[List[int]] = None,
               point_encoder: Optional[PointEncoder] = None,
               graph_encoder: Optional[GraphEncoder] = None) -> IPGN:
    pgn = PointGraphNetwork(
        fusion_cfg,
        point_encoder or PointEncoder(enc_cfg),
        graph_encoder or GraphEncoder(enc_cfg),
    )
    return IPGN(pgn, stage_mask)


def ipgn_config(model: IPGN, enc_cfg: EncoderConfig, cfg: Optional[TrainConfig] = None) -> dict:
    return {
        "kind": "ipgn",
        "fusion": model.cfg.to_dict(),
        "encoder": enc_cfg.to_dict(),
        "stage_mask": list(model.stage_mask),
        "train": cfg.to_dict() if cfg else None,
    }


def load_ipgn(path: PathLike) -> IPGN:
    config = _stored_config(path)
    if config.get("kind") != "ipgn":
        raise CheckpointError(f"{path} is not a full model checkpoint (kind={config.get('kind')!r})")
    try:
        model = build_ipgn(FusionConfig(**config["fusion"]), EncoderConfig(**config["encoder"]),
                           config["stage_mask"])
    except (KeyError, TypeError, ValueError, ShapeError) as e:
        raise CheckpointError(f"bad model config in {path}: {e!r}") from e
    load_into(model, path)
    model.eval()
    return model


@dataclass
class StepOutput:
    loss: torch.Tensor
    terms: Dict[str, float] = field(default_factory=dict)


def joint_loss(model: IPGN, batch: TrainBatch, ctx: Optional[FusionContext] = None) -> StepOutput:
    """Unweighted sum of the mean point, node, edge and implicit cross-entropies."""
    if ctx is None:
        ctx = model.context(batch.points, batch.graph, node_coords=batch.node_coords)
    out, _, implicit_logits = model(ctx, batch.implicit_coords if len(batch.implicit_coords) else None)

    terms = {
        "point": cross_entropy(out.point_logits, _labels(batch.point_labels)),
        "node": cross_entropy(out.node_logits, _labels(batch.node_labels)),
    }
    if len(batch.edge_labels):
        terms["edge"] = cross_entropy(out.edge_logits, _labels(batch.edge_labels))
    if implicit_logits is not None:
        terms["implicit"] = cross_entropy(implicit_logits, _labels(batch.implicit_labels))

    loss = sum(terms.values())
    return StepOutput(loss, {k: float(v.detach()) for k, v in terms.items()})


def loss_closure(model: IPGN, batch: TrainBatch) -> Callable[[], torch.Tensor]:
    """Joint loss as a function of the current parameters only; neighborhoods are fixed once."""
    ctx = model.context(batch.points, batch.graph, node_coords=batch.node_coords)
    return lambda: joint_loss(model, batch, ctx).loss


def validate(model: IPGN, samples: List[TreeSample], cfg: TrainConfig) -> Dict[str, float]:
    point, node, edge = [], [], []
    with torch.no_grad():
        for sample in samples:
            batch = make_batch(sample, cfg, 0, augmented=False, stream="validation-sample")
            ctx = model.context(batch.points, batch.graph)
            out = model.pgn(ctx)
            point.append(accuracy(out.point_logits.argmax(1).numpy() + 1, batch.point_labels + 1))
            node.append(accuracy(out.node_logits.argmax(1).numpy() + 1, batch.node_labels + 1))
            if len(batch.edge_labels):
                edge.append(accuracy(out.edge_logits.argmax(1).numpy() + 1, batch.edge_labels + 1))
    return {
        "val_point_acc": float(np.mean(point)),
        "val_node_acc": float(np.mean(node)),
        "val_edge_acc": float(np.mean(edge)) if edge else float("nan"),
    }


def load_encoders(encoders: EncoderCheckpoints) -> Tuple[PointEncoder, GraphEncoder]:
    return load_segmenter(encoders.point).encoder, load_segmenter(encoders.graph).encoder


def train_ipgn(manifest: DatasetManifest, encoders: EncoderCheckpoints, cfg: TrainConfig,
               fusion_cfg: FusionConfig, enc_cfg: EncoderConfig, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples = load_split(manifest, "train")
    val_samples = load_split(manifest, "val")
    if not val_samples:
        logger.warning("Empty validation split; validating on the training trees")
        val_samples = train_samples

    point_encoder, graph_encoder = load_encoders(encoders)
    seed_torch(cfg.seed, "init-ipgn")
    model = build_ipgn(fusion_cfg, enc_cfg, cfg.stage_mask, point_encoder, graph_encoder)
    if cfg.fine_tune_encoders:
        model.pgn.unfreeze_encoders()
    else:
        model.pgn.freeze_encoders()
    store = ParameterStore(model)
    logger.info(f"Joint training: {len(store.trainable())} trainable tensors, encoders_trainable={model.pgn.encoders_trainable}")

    best_path = out_dir / "ipgn.json"
    best = -1.0
    rows = []
    for epoch in range(1, cfg.joint_epochs + 1):
        lr = lr_at(cfg.joint_lr, epoch, cfg.lr_halving)
        model.train()
        losses = []
        for i in _epoch_order(len(train_samples), cfg.seed, "joint-order", epoch):
            sample = train_samples[int(i)]
            batch = make_batch(sample, cfg, epoch, stream="joint-sample")
            store.zero_grad()
            step = joint_loss(model, batch)
            losses.append(_check_finite(step.loss, {"phase": "joint", "epoch": epoch, "tree": sample.id, "lr": lr, **step.terms}))
            backward(step.loss, store)
            adam_step(store, lr, cfg.betas, cfg.adam_eps)

        model.eval()
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), **validate(model, val_samples, cfg)}
        rows.append(row)
        _write_log(rows, out_dir / "train_log.csv")
        logger.info(
            f"[joint] epoch={epoch}/{cfg.joint_epochs} lr={lr:.5f} loss={row['train_loss']:.4f} "
            f"val_point={row['val_point_acc']:.2f} val_node={row['val_node_acc']:.2f}"
        )
        if row["val_point_acc"] > best:
            best = row["val_point_acc"]
            save_checkpoint(model, best_path, ipgn_config(model, enc_cfg, cfg))

    if best < 0:
        save_checkpoint(model, best_path, ipgn_config(model, enc_cfg, cfg))
    (out_dir / "train_summary.json").write_text(json.dumps({"best_val_point_acc": best, "epochs": len(rows)}, indent=2))
    logger.success(f"✅ Joint training done: best val point acc={best:.2f} -> {best_path}")
    return best_path
