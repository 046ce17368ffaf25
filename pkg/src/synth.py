# src/synth.py
"""
Procedural airway-like trees with exact dense labels.

A tree is a set of straight tapered tube segments. Every foreground voxel
takes the class of its nearest centerline segment. The trunk class is
num_classes; the first bifurcation's children split classes 1..C-1 between
them, recursively, and a subtree whose block shrinks to one class keeps it.
Segments still holding a multi-class block belong to the trunk class.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.skeleton import build_graph, save_graph
from src.utils.config import DESK_NUM_CLASSES, SPLIT_RATIOS
from src.utils.errors import SynthError
from src.utils.logger import logger
from src.utils.seeding import substream
from src.volume import LabelVolume, save_volume

PathLike = Union[str, Path]

MANIFEST_VERSION = 1


@dataclass
class TreeSpec:
    seed: int = 0
    depth: int = 4
    branching: int = 2
    length_range: Tuple[float, float] = (0.22, 0.28)    # trunk length, fraction of grid
    length_decay: Tuple[float, float] = (0.65, 0.8)     # child / parent length
    radius_range: Tuple[float, float] = (2.5, 3.0)      # trunk radius, voxels
    taper: float = 0.75                                 # child / parent radius
    min_radius: float = 1.0
    angle_range: Tuple[float, float] = (25.0, 45.0)     # degrees off the parent direction
    grid: int = 64
    num_classes: int = DESK_NUM_CLASSES
    max_retries: int = 25

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        self.length_decay = tuple(self.length_decay)
        self.radius_range = tuple(self.radius_range)
        self.angle_range = tuple(self.angle_range)
        self.validate()

    def validate(self) -> None:
        if self.depth < 0 or self.branching < 1:
            raise SynthError(f"depth must be >= 0 and branching >= 1, got {self.depth}/{self.branching}")
        if self.grid < 8:
            raise SynthError(f"grid {self.grid} too small")
        if not 2 <= self.num_classes <= 255:
            raise SynthError(f"num_classes must lie in 2..255, got {self.num_classes}")
        for name in ("length_range", "length_decay", "radius_range", "angle_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise SynthError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if not 0 < self.taper <= 1 or not self.min_radius > 0:
            raise SynthError("taper must lie in (0, 1] and min_radius must be positive")
        if self.max_retries < 1:
            raise SynthError("max_retries must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    def with_seed(self, seed: int) -> "TreeSpec":
        d = self.to_dict()
        d["seed"] = int(seed)
        return TreeSpec(**d)


@dataclass
class TreeSegment:
    id: int
    start: int                  # centerline node ids
    end: int
    radius_start: float
    radius_end: float
    depth: int
    parent: int                 # -1 for the trunk
    label: int


@dataclass
class Centerline:
    """Ground-truth centerline: nodes at the root, bifurcations and tips."""
    points: np.ndarray                                  # P x 3 voxel coords (x, y, z), float
    segments: List[TreeSegment] = field(default_factory=list)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self.points), dtype=np.int64)
        for s in self.segments:
            deg[s.start] += 1
            deg[s.end] += 1
        return deg

    def num_bifurcations_and_tips(self) -> int:
        return int(np.count_nonzero(self.degrees() != 2))

    def labels(self) -> List[int]:
        return [s.label for s in self.segments]

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "segments": [asdict(s) for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Centerline":
        return cls(
            points=np.asarray(d["points"], dtype=np.float64).reshape(-1, 3),
            segments=[TreeSegment(**s) for s in d["segments"]],
        )


# ================= GEOMETRY =================

def _orthonormal(direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(direction, u)


def _child_directions(direction: np.ndarray, count: int, spec: TreeSpec,
                      rng: np.random.Generator) -> List[np.ndarray]:
    u, w = _orthonormal(direction)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    out = []
    for i in range(count):
        theta = np.radians(rng.uniform(*spec.angle_range))
        phi = phase + 2.0 * np.pi * i / count
        d = np.cos(theta) * direction + np.sin(theta) * (np.cos(phi) * u + np.sin(phi) * w)
        out.append(d / np.linalg.norm(d))
    return out


def _split_classes(block: List[int], count: int) -> List[List[int]]:
    parts = [list(p) for p in np.array_split(np.asarray(block, dtype=np.int64), count)]
    return [p if p else [block[-1]] for p in parts]


def _grow(spec: TreeSpec, rng: np.random.Generator) -> Centerline:
    g = spec.grid
    trunk_class = spec.num_classes
    trunk_radius = rng.uniform(*spec.radius_range)
    root = np.array([g / 2.0, g / 2.0, g - 3.0 - trunk_radius])
    points = [root]
    segments: List[TreeSegment] = []

    # (start node, direction, length, radius, depth, parent segment, class block)
    queue = [(0, np.array([0.0, 0.0, -1.0]), rng.uniform(*spec.length_range) * g,
              trunk_radius, 0, -1, list(range(1, spec.num_classes)))]
    while queue:
        start, direction, length, radius, depth, parent, block = queue.pop(0)
        end_point = points[start] + direction * length
        points.append(end_point)
        end = len(points) - 1

        label = block[0] if parent >= 0 and len(block) == 1 else trunk_class
        r_end = max(radius * spec.taper, spec.min_radius)
        seg = TreeSegment(len(segments), start, end, float(radius), float(r_end), depth, parent, int(label))
        segments.append(seg)

        if depth >= spec.depth:
            continue
        children = _child_directions(direction, spec.branching, spec, rng)
        blocks = [block] * spec.branching if len(block) == 1 else _split_classes(block, spec.branching)
        for child_dir, child_block in zip(children, blocks):
            child_len = length * rng.uniform(*spec.length_decay)
            queue.append((end, child_dir, child_len, r_end, depth + 1, seg.id, child_block))

    return Centerline(points=np.asarray(points, dtype=np.float64), segments=segments)


def _fits(centerline: Centerline, grid: int) -> bool:
    for s in centerline.segments:
        for node, r in ((s.start, s.radius_start), (s.end, s.radius_end)):
            p = centerline.points[node]
            if (p - r < 1.0).any() or (p + r > grid - 2.0).any():
                return False
    return True


# ================= RASTERIZATION =================

def segment_distance(voxels: np.ndarray, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from each voxel center to segment ab, and the clamped projection t."""
    ba = b - a
    pa = voxels - a
    denom = float(ba @ ba)
    t = np.clip(pa @ ba / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(voxels))
    return np.linalg.norm(pa - np.outer(t, ba), axis=1), t


def _bbox_voxels(a: np.ndarray, b: np.ndarray, r: float, grid: int) -> np.ndarray:
    lo = np.maximum(np.floor(np.minimum(a, b) - r), 0).astype(np.int64)
    hi = np.minimum(np.ceil(np.maximum(a, b) + r), grid - 1).astype(np.int64)
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def rasterize(centerline: Centerline, grid: int, num_classes: int) -> LabelVolume:
    mask = np.zeros((grid, grid, grid), dtype=bool)            # (z, y, x)
    for s in centerline.segments:
        a = centerline.points[s.start]
        b = centerline.points[s.end]
        voxels = _bbox_voxels(a, b, max(s.radius_start, s.radius_end), grid)
        dist, t = segment_distance(voxels.astype(np.float64), a, b)
        inside = voxels[dist <= s.radius_start + t * (s.radius_end - s.radius_start)]
        mask[inside[:, 2], inside[:, 1], inside[:, 0]] = True

    z, y, x = np.nonzero(mask)
    fg = np.stack([x, y, z], axis=1).astype(np.float64)
    best = np.full(len(fg), np.inf)
    labels = np.zeros(len(fg), dtype=np.uint8)
    for s in centerline.segments:
        dist, _ = segment_distance(fg, centerline.points[s.start], centerline.points[s.end])
        closer = dist < best                                    # strict: smaller segment id wins ties
        best[closer] = dist[closer]
        labels[closer] = s.label

    data = np.zeros_like(mask, dtype=np.uint8)
    data[z, y, x] = labels
    return LabelVolume.from_array(data, num_classes=num_classes)


def generate_tree(spec: TreeSpec) -> Tuple[LabelVolume, Centerline]:
    spec.validate()
    for attempt in range(spec.max_retries):
        rng = substream(spec.seed, "synth-geometry", attempt)
        centerline = _grow(spec, rng)
        if _fits(centerline, spec.grid):
            if attempt:
                logger.debug(f"Tree seed={spec.seed} accepted after {attempt} rejected draw(s)")
            return rasterize(centerline, spec.grid, spec.num_classes), centerline
    raise SynthError(
        f"tree seed={spec.seed} left the {spec.grid}^3 grid in all {spec.max_retries} attempts"
    )


# ================= DATASET =================

def split_indices(n: int, base_seed: int) -> Dict[str, List[int]]:
    """
    Floor rule: val = floor(0.1 n), test = floor(0.2 n), train takes the rest,
    so n=1 gives train=[0].
    """
    order = substream(base_seed, "dataset-split").permutation(n)
    n_val = int(np.floor(SPLIT_RATIOS[1] * n))
    n_test = int(np.floor(SPLIT_RATIOS[2] * n))
    n_train = n - n_val - n_test
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


def tree_seeds(n: int, base_seed: int) -> List[int]:
    return [int(s) for s in substream(base_seed, "dataset-seeds").integers(0, 2**31 - 1, size=n)]


def generate_dataset(n: int, base_seed: int, spec: TreeSpec, out_dir: PathLike) -> dict:
    if n < 1:
        raise SynthError(f"dataset needs at least one tree, got n={n}")
    out_dir = Path(out_dir)
    trees_dir = out_dir / "trees"
    trees_dir.mkdir(parents=True, exist_ok=True)

    split = split_indices(n, base_seed)
    entries, rows = [], []
    for i, seed in enumerate(tree_seeds(n, base_seed)):
        vol, centerline = generate_tree(spec.with_seed(seed))
        graph = build_graph(vol)
        stem = f"tree_{i:03d}"
        save_volume(vol, trees_dir / f"{stem}.json")
        save_graph(graph, trees_dir / f"{stem}.graph.json")
        (trees_dir / f"{stem}.centerline.json").write_text(json.dumps(centerline.to_dict()))

        entries.append({
            "id": i,
            "seed": seed,
            "volume": f"trees/{stem}.json",
            "graph": f"trees/{stem}.graph.json",
            "centerline": f"trees/{stem}.centerline.json",
        })
        rows.append({
            "id": i,
            "seed": seed,
            "foreground": int(np.count_nonzero(vol.data)),
            "nodes": graph.num_nodes,
            "edges": graph.num_edges,
            "centerline_nodes": len(centerline.points),
        })
        logger.info(f"Tree {i + 1}/{n} seed={seed} fg={rows[-1]['foreground']} nodes={graph.num_nodes}")

    manifest = {
        "format_version": MANIFEST_VERSION,
        "base_seed": int(base_seed),
        "spec": spec.to_dict(),
        "trees": entries,
        "split": split,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    pd.DataFrame(rows).to_csv(out_dir / "trees.csv", index=False)
    logger.success(
        f"✅ Dataset written to {out_dir}: {n} trees "
        f"(train={len(split['train'])} val={len(split['val'])} test={len(split['test'])})"
    )
    return manifest


@dataclass
class TreeRecord:
    id: int
    seed: int
    volume: Path
    graph: Path
    centerline: Optional[Path] = None


@dataclass
class DatasetManifest:
    root: Path
    trees: List[TreeRecord]
    split: Dict[str, List[int]]
    spec: Optional[TreeSpec] = None

    def records(self, part: str) -> List[TreeRecord]:
        if part not in self.split:
            raise SynthError(f"unknown split {part!r}")
        by_id = {t.id: t for t in self.trees}
        missing = [i for i in self.split[part] if i not in by_id]
        if missing:
            raise SynthError(f"split {part!r} names unknown tree id(s) {missing}")
        return [by_id[i] for i in self.split[part]]


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SynthError(f"{what} {path} is not valid JSON: {e}") from e


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    raw = _read_json(path, "dataset manifest")
    root = path.parent
    try:
        trees = [
            TreeRecord(
                id=int(t["id"]),
                seed=int(t["seed"]),
                volume=root / t["volume"],
                graph=root / t["graph"],
                centerline=root / t["centerline"] if t.get("centerline") else None,
            )
            for t in raw["trees"]
        ]
        split = {k: [int(i) for i in v] for k, v in raw["split"].items()}
        spec = TreeSpec(**raw["spec"]) if raw.get("spec") else None
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise SynthError(f"malformed manifest {path}: {e!r}") from e
    return DatasetManifest(root=root, trees=trees, split=split, spec=spec)


def load_centerline(path: PathLike) -> Centerline:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"centerline file not found: {path}")
    raw = _read_json(path, "centerline")
    try:
        return Centerline.from_dict(raw)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise SynthError(f"malformed centerline {path}: {e!r}") from e
