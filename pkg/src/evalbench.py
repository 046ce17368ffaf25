# src/evalbench.py
"""
Metrics, the nearest-graph-element densification baseline and the
reconstruction-speed benchmark.

All metrics are percentages in [0, 100]. Background (label 0) is never
scored: callers pass foreground vectors, and accuracy ignores 0 by default.
"""

import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from src.implicit import reconstruct_dense, repeated_inference_reconstruct
from src.skeleton import SkeletonGraph
from src.spatial import build_index, knn_batch
from src.utils.config import NUM_POINTS
from src.utils.errors import MetricError
from src.utils.logger import logger
from src.utils.seeding import substream
from src.volume import LabelVolume, foreground_arrays

PathLike = Union[str, Path]

MICRO = "micro"
MACRO = "macro"


@dataclass
class EvalOptions:
    num_classes: int = 8
    dice_classes: Optional[List[int]] = None        # micro dice subset; default 1..C-1
    repeats: int = 3                                # benchmark timing runs

    def micro_classes(self) -> List[int]:
        if self.dice_classes:
            return list(self.dice_classes)
        return list(range(1, max(self.num_classes, 2)))

    def all_classes(self) -> List[int]:
        return list(range(1, self.num_classes + 1))


# ================= METRICS =================

def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise MetricError(f"prediction has {pred.size} entries, truth has {true.size}")
    return pred, true


def accuracy(pred, true, ignore: Iterable[int] = (0,)) -> float:
    pred, true = _pair(pred, true)
    keep = ~np.isin(true, list(ignore))
    if not keep.any():
        raise MetricError("every entry is ignored")
    return 100.0 * float(np.count_nonzero(pred[keep] == true[keep])) / float(np.count_nonzero(keep))


def confusion_counts(pred, true, classes: Sequence[int]) -> pd.DataFrame:
    """Per-class TP / FP / FN, one row per class."""
    pred, true = _pair(pred, true)
    rows = []
    for c in classes:
        p, t = pred == c, true == c
        rows.append({
            "class": int(c),
            "tp": int(np.count_nonzero(p & t)),
            "fp": int(np.count_nonzero(p & ~t)),
            "fn": int(np.count_nonzero(~p & t)),
        })
    return pd.DataFrame(rows, columns=["class", "tp", "fp", "fn"])


def per_class_dice(pred, true, classes: Sequence[int]) -> Dict[int, float]:
    """Classes absent from both vectors are left out."""
    counts = confusion_counts(pred, true, classes)
    out = {}
    for row in counts.itertuples(index=False):
        denom = 2 * row.tp + row.fp + row.fn
        if denom:
            out[int(row[0])] = 100.0 * 2 * row.tp / denom
    return out


def dice(pred, true, classes: Sequence[int], mode: str = MICRO) -> float:
    classes = list(classes)
    if not classes:
        raise MetricError("dice needs at least one class")
    if mode == MICRO:
        counts = confusion_counts(pred, true, classes)
        tp, fp, fn = (int(counts[c].sum()) for c in ("tp", "fp", "fn"))
        denom = 2 * tp + fp + fn
        if denom == 0:
            # none of the listed classes occurs in either vector
            return float("nan")
        return 100.0 * 2 * tp / denom
    if mode == MACRO:
        scores = per_class_dice(pred, true, classes)
        return float(np.mean(list(scores.values()))) if scores else float("nan")
    raise MetricError(f"unknown dice mode {mode!r}")


def same_topology(a: SkeletonGraph, b: SkeletonGraph) -> bool:
    if a.num_nodes != b.num_nodes or a.num_edges != b.num_edges:
        return False
    return bool(np.array_equal(a.edge_array(), b.edge_array()))


def graph_metrics(pred: SkeletonGraph, truth: SkeletonGraph,
                  classes: Optional[Sequence[int]] = None) -> Dict[str, float]:
    if not same_topology(pred, truth):
        raise MetricError(
            f"graph topology differs: {pred.num_nodes}/{pred.num_edges} vs {truth.num_nodes}/{truth.num_edges}"
        )
    pn, tn = pred.node_labels(), truth.node_labels()
    pe, te = pred.edge_labels(), truth.edge_labels()
    if classes is None:
        classes = sorted(set(np.concatenate([pn, tn, pe, te]).tolist()) - {0})
    out = {
        "node_accuracy": accuracy(pn, tn),
        "node_dice": dice(pn, tn, classes),
        "edge_accuracy": float("nan"),
        "edge_dice": float("nan"),
    }
    if len(te):
        out["edge_accuracy"] = accuracy(pe, te)
        out["edge_dice"] = dice(pe, te, classes)
    return out


# ================= REPORTS =================

@dataclass
class EvalReport:
    point_accuracy: float
    micro_dice: float
    macro_dice: float
    per_class_dice: Dict[int, float] = field(default_factory=dict)
    node_accuracy: Optional[float] = None
    node_dice: Optional[float] = None
    edge_accuracy: Optional[float] = None
    edge_dice: Optional[float] = None
    counts: Dict[str, int] = field(default_factory=dict)
    dice_classes: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_dice"] = {str(k): v for k, v in self.per_class_dice.items()}
        return d

    def table(self) -> pd.DataFrame:
        rows = [
            ("point accuracy %", self.point_accuracy),
            ("micro dice %", self.micro_dice),
            ("macro dice %", self.macro_dice),
            ("node accuracy %", self.node_accuracy),
            ("node dice %", self.node_dice),
            ("edge accuracy %", self.edge_accuracy),
            ("edge dice %", self.edge_dice),
        ]
        rows += [(f"dice class {c} %", v) for c, v in sorted(self.per_class_dice.items())]
        rows += [(f"{k}", v) for k, v in self.counts.items()]
        return pd.DataFrame(
            [(name, value) for name, value in rows if value is not None], columns=["metric", "value"]
        )


def evaluate_labels(pred, true, options: EvalOptions) -> EvalReport:
    pred, true = _pair(pred, true)
    return EvalReport(
        point_accuracy=accuracy(pred, true),
        micro_dice=dice(pred, true, options.micro_classes(), MICRO),
        macro_dice=dice(pred, true, options.all_classes(), MACRO),
        per_class_dice=per_class_dice(pred, true, options.all_classes()),
        counts={"voxels": int(np.count_nonzero(true))},
        dice_classes=options.micro_classes(),
    )


def evaluate_volumes(pred: LabelVolume, truth: LabelVolume, options: EvalOptions,
                     pred_graph: Optional[SkeletonGraph] = None,
                     true_graph: Optional[SkeletonGraph] = None) -> EvalReport:
    """Scores pred on the truth foreground; graph metrics when both graphs are given."""
    if pred.dims != truth.dims:
        raise MetricError(f"volume dims differ: {pred.dims} vs {truth.dims}")
    voxels, true_labels = foreground_arrays(truth)
    if len(voxels) == 0:
        raise MetricError("truth volume has empty foreground")
    pred_labels = pred.data[voxels[:, 2], voxels[:, 1], voxels[:, 0]].astype(np.int64)
    report = evaluate_labels(pred_labels, true_labels, options)

    if pred_graph is not None and true_graph is not None:
        g = graph_metrics(pred_graph, true_graph, options.all_classes())
        report.node_accuracy = g["node_accuracy"]
        report.node_dice = g["node_dice"]
        report.edge_accuracy = g["edge_accuracy"]
        report.edge_dice = g["edge_dice"]
        report.counts.update({"nodes": true_graph.num_nodes, "edges": true_graph.num_edges})
    return report


def write_report(report, out_dir: PathLike, name: str = "report", provenance: Optional[dict] = None) -> Path:
    """<name>.json plus a human-readable <name>.txt table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if provenance is not None:
        payload["provenance"] = provenance
    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
    (out_dir / f"{name}.txt").write_text(report.table().to_string(index=False) + "\n")
    logger.success(f"Report written: {json_path}")
    return json_path


# ================= GRAPH DILATION =================

def graph_elements(graph: SkeletonGraph):
    """
    Candidate voxels and their element ids: nodes first (ids 0..N-1, every
    member voxel), then edges (ids N..N+E-1, every path voxel).
    """
    voxels, elements, labels = [], [], []
    for n in graph.nodes:
        for m in (n.members or [n.voxel]):
            voxels.append(m)
            elements.append(n.id)
            labels.append(n.label)
    for e in graph.edges:
        for p in e.path:
            voxels.append(p)
            elements.append(graph.num_nodes + e.id)
            labels.append(e.label)
    return (
        np.asarray(voxels, dtype=np.float64).reshape(-1, 3),
        np.asarray(elements, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
    )


def dilate_graph_prediction(graph: SkeletonGraph, vol: LabelVolume) -> LabelVolume:
    """Every foreground voxel takes the label of its nearest graph element."""
    if graph.num_nodes == 0:
        raise MetricError("cannot densify an empty graph")
    cand, elements, labels = graph_elements(graph)
    order = np.lexsort((np.arange(len(elements)), elements))        # index order follows element id
    cand, labels = cand[order], labels[order]

    spacing = np.asarray(vol.spacing)
    voxels, _ = foreground_arrays(vol)
    ids, _ = knn_batch(build_index(cand * spacing), voxels * spacing, 1)
    data = np.zeros_like(vol.data)
    data[voxels[:, 2], voxels[:, 1], voxels[:, 0]] = labels[ids[:, 0]]
    return LabelVolume(vol.dims, vol.spacing, data, vol.num_classes)


# ================= BASELINES =================

def _grouped_predict(coords: np.ndarray, num_points: int, seed: int, predict) -> np.ndarray:
    order = substream(seed, "baseline-groups").permutation(len(coords))
    labels = np.zeros(len(coords), dtype=np.int64)
    for start in range(0, len(coords), num_points):
        group = order[start:start + num_points]
        labels[group] = predict(coords[group])
    return labels


def evaluate_point_baseline(segmenter, truth: LabelVolume, graph: SkeletonGraph, options: EvalOptions,
                            num_points: int = NUM_POINTS, seed: int = 0) -> EvalReport:
    """Point-context-only row: the pre-trained point encoder and its head over disjoint groups."""
    voxels, true_labels = foreground_arrays(truth)
    coords = graph.transform.to_normalized(voxels)
    dtype = next(segmenter.parameters()).dtype

    def predict(chunk):
        with torch.no_grad():
            return segmenter(torch.as_tensor(chunk, dtype=dtype)).argmax(1).numpy() + 1

    return evaluate_labels(_grouped_predict(coords, num_points, seed, predict), true_labels, options)


def evaluate_graph_baseline(segmenter, truth: LabelVolume, graph: SkeletonGraph,
                            options: EvalOptions) -> EvalReport:
    """Graph-context-only row: node/edge predictions densified by nearest graph element."""
    dtype = next(segmenter.parameters()).dtype
    with torch.no_grad():
        node_logits, edge_logits = segmenter(
            torch.as_tensor(graph.node_coords(), dtype=dtype),
            torch.as_tensor(graph.adjacency_matrix(True)),
            torch.as_tensor(graph.edge_array()),
        )
    predicted = graph.with_labels(node_logits.argmax(1).numpy() + 1, edge_logits.argmax(1).numpy() + 1)
    dense = dilate_graph_prediction(predicted, truth.binary())
    return evaluate_volumes(dense, truth, options, predicted, graph)


# ================= BENCHMARK =================

@dataclass
class VolumeTiming:
    name: str
    foreground: int
    implicit_seconds: float
    repeated_seconds: float
    implicit_passes: int
    repeated_passes: int
    implicit_accuracy: Optional[float] = None
    repeated_accuracy: Optional[float] = None

    @property
    def speedup(self) -> float:
        return self.repeated_seconds / self.implicit_seconds

    @property
    def accuracy_gap(self) -> Optional[float]:
        if self.implicit_accuracy is None or self.repeated_accuracy is None:
            return None
        return self.implicit_accuracy - self.repeated_accuracy


@dataclass
class BenchReport:
    volumes: List[VolumeTiming] = field(default_factory=list)
    repeats: int = 3
    hardware: Dict[str, str] = field(default_factory=dict)

    @property
    def median_speedup(self) -> float:
        return float(np.median([v.speedup for v in self.volumes])) if self.volumes else float("nan")

    def to_dict(self) -> dict:
        return {
            "repeats": self.repeats,
            "hardware": self.hardware,
            "median_speedup": self.median_speedup,
            "volumes": [
                {**asdict(v), "speedup": v.speedup, "accuracy_gap": v.accuracy_gap} for v in self.volumes
            ],
        }

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.to_dict()["volumes"])

    def to_row(self) -> dict:
        """One CSV trend row per benchmark run."""
        gaps = [abs(v.accuracy_gap) for v in self.volumes if v.accuracy_gap is not None]
        return {
            "volumes": len(self.volumes),
            "foreground_total": sum(v.foreground for v in self.volumes),
            "implicit_seconds": float(sum(v.implicit_seconds for v in self.volumes)),
            "repeated_seconds": float(sum(v.repeated_seconds for v in self.volumes)),
            "median_speedup": self.median_speedup,
            "max_accuracy_gap": max(gaps) if gaps else float("nan"),
        }


def append_row(row: dict, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([row])
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    return path


def _timed(fn, repeats: int):
    times, result = [], None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times)), result


@dataclass
class BenchCase:
    name: str
    volume: LabelVolume                     # binary or labeled; reconstruction uses its foreground
    graph: SkeletonGraph                    # precomputed before timing
    truth: Optional[LabelVolume] = None


def bench_reconstruction(model, cases: List[BenchCase], num_points: int = NUM_POINTS,
                         repeats: int = 3, seed: int = 0) -> BenchReport:
    """Median-of-repeats wall clock for implicit vs repeated-inference reconstruction."""
    report = BenchReport(repeats=repeats, hardware={
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "torch_threads": str(torch.get_num_threads()),
    })
    for case in cases:
        binary = case.volume.binary()
        fg = int(np.count_nonzero(binary.data))
        if fg <= num_points:
            logger.warning(f"{case.name}: foreground {fg} <= {num_points}; both paths run one pass (degenerate)")

        model.reset_counters()
        t_implicit, implicit = _timed(
            lambda: reconstruct_dense(binary, model, case.graph, num_points, seed), repeats)
        implicit_passes = model.backbone_calls // repeats

        model.reset_counters()
        t_repeated, repeated = _timed(
            lambda: repeated_inference_reconstruct(binary, model, case.graph, num_points, seed), repeats)
        repeated_passes = model.backbone_calls // repeats

        timing = VolumeTiming(case.name, fg, t_implicit, t_repeated, implicit_passes, repeated_passes)
        if case.truth is not None:
            options = EvalOptions(num_classes=model.cfg.num_classes)
            timing.implicit_accuracy = evaluate_volumes(implicit, case.truth, options).point_accuracy
            timing.repeated_accuracy = evaluate_volumes(repeated, case.truth, options).point_accuracy
        report.volumes.append(timing)
        logger.info(
            f"Bench {case.name}: fg={fg} implicit={t_implicit:.3f}s ({implicit_passes} pass) "
            f"repeated={t_repeated:.3f}s ({repeated_passes} passes) speedup={timing.speedup:.2f}x"
        )
    return report
