# src/skeleton.py
"""
Thinning and centerline-graph extraction.

thin() runs the 3-D Lee thinning from scikit-image and then a deterministic
clean-up over the 6 directional sub-cycles that deletes every remaining simple,
non-end voxel. extract_graph() turns the one-voxel-wide skeleton into nodes
(end points, junctions) and edges (maximal degree-2 chains).

Masks are (z, y, x) arrays; every voxel handed out publicly is (x, y, z).
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from src.utils.errors import SkeletonError
from src.utils.logger import logger
from src.volume import CoordTransform, LabelVolume, make_transform

Voxel = Tuple[int, int, int]

_STRUCT26 = np.ones((3, 3, 3), dtype=bool)
_STRUCT6 = ndimage.generate_binary_structure(3, 1)

_N18 = ndimage.generate_binary_structure(3, 2).copy()
_N18[1, 1, 1] = False
_FACES = _STRUCT6.copy()
_FACES[1, 1, 1] = False

# 26 neighbor offsets in (dz, dy, dx), fixed scan order
_OFFSETS = [
    (dz, dy, dx)
    for dz in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dx in (-1, 0, 1)
    if (dz, dy, dx) != (0, 0, 0)
]

# one sub-cycle per face direction: U, D, N, S, E, W
_DIRECTIONS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]


@dataclass
class SkeletonNode:
    id: int
    voxel: Voxel
    coord: Tuple[float, float, float]
    label: int = 0
    members: List[Voxel] = field(default_factory=list)


@dataclass
class SkeletonEdge:
    id: int
    u: int
    v: int
    path: List[Voxel]
    label: int = 0


@dataclass
class SkeletonGraph:
    nodes: List[SkeletonNode] = field(default_factory=list)
    edges: List[SkeletonEdge] = field(default_factory=list)
    transform: Optional[CoordTransform] = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def adjacency(self) -> List[List[int]]:
        """Per-node neighbor list; parallel edges appear once per edge."""
        adj: List[List[int]] = [[] for _ in self.nodes]
        for e in self.edges:
            adj[e.u].append(e.v)
            adj[e.v].append(e.u)
        return adj

    def adjacency_matrix(self, self_loops: bool = True) -> np.ndarray:
        n = len(self.nodes)
        mat = np.zeros((n, n), dtype=bool)
        for e in self.edges:
            mat[e.u, e.v] = True
            mat[e.v, e.u] = True
        if self_loops:
            mat[np.arange(n), np.arange(n)] = True
        return mat

    def edge_array(self) -> np.ndarray:
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([[e.u, e.v] for e in self.edges], dtype=np.int64)

    def node_coords(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 3), dtype=np.float64)
        return np.array([n.coord for n in self.nodes], dtype=np.float64)

    def node_labels(self) -> np.ndarray:
        return np.array([n.label for n in self.nodes], dtype=np.int64)

    def edge_labels(self) -> np.ndarray:
        return np.array([e.label for e in self.edges], dtype=np.int64)

    def voxel_count(self) -> int:
        return sum(len(n.members) for n in self.nodes) + sum(len(e.path) for e in self.edges)

    def with_labels(self, node_labels, edge_labels) -> "SkeletonGraph":
        if len(node_labels) != len(self.nodes) or len(edge_labels) != len(self.edges):
            raise SkeletonError("label vectors do not match graph topology")
        nodes = [replace(n, label=int(l), members=list(n.members)) for n, l in zip(self.nodes, node_labels)]
        edges = [replace(e, label=int(l), path=list(e.path)) for e, l in zip(self.edges, edge_labels)]
        return SkeletonGraph(nodes, edges, self.transform)

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "voxel": list(n.voxel),
                    "coord": list(n.coord),
                    "label": n.label,
                    "members": [list(m) for m in n.members],
                }
                for n in self.nodes
            ],
            "edges": [
                {"id": e.id, "u": e.u, "v": e.v, "label": e.label, "path": [list(p) for p in e.path]}
                for e in self.edges
            ],
            "transform": self.transform.to_dict() if self.transform else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonGraph":
        nodes = [
            SkeletonNode(
                id=int(n["id"]),
                voxel=tuple(n["voxel"]),
                coord=tuple(float(c) for c in n["coord"]),
                label=int(n["label"]),
                members=[tuple(m) for m in n.get("members", [n["voxel"]])],
            )
            for n in d["nodes"]
        ]
        edges = [
            SkeletonEdge(
                id=int(e["id"]),
                u=int(e["u"]),
                v=int(e["v"]),
                path=[tuple(p) for p in e["path"]],
                label=int(e["label"]),
            )
            for e in d["edges"]
        ]
        transform = CoordTransform.from_dict(d["transform"]) if d.get("transform") else None
        graph = cls(nodes, edges, transform)
        graph.validate()
        return graph

    def validate(self) -> None:
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise SkeletonError(f"node ids must be 0..N-1 in order, got {node.id} at {i}")
        for e in self.edges:
            if not (0 <= e.u < n and 0 <= e.v < n):
                raise SkeletonError(f"edge {e.id} has dangling endpoint ({e.u}, {e.v})")
            if e.u == e.v:
                raise SkeletonError(f"edge {e.id} is a self-loop on node {e.u}")


# ================= THINNING =================

def is_simple_point(cube: np.ndarray) -> bool:
    """
    cube: 3x3x3 neighborhood, center = candidate voxel.
    Simple iff the 26-neighborhood foreground (center removed) is one
    26-component and exactly one 6-component of the 18-neighborhood
    background touches the center through a face.
    """
    cube = np.asarray(cube, dtype=bool)
    fg = cube.copy()
    fg[1, 1, 1] = False
    _, n_fg = ndimage.label(fg, structure=_STRUCT26)
    if n_fg != 1:
        return False

    bg = ~cube & _N18
    labels, _ = ndimage.label(bg, structure=_STRUCT6)
    touching = np.unique(labels[_FACES])
    touching = touching[touching > 0]
    return len(touching) == 1


def _as_mask(vol: Union[LabelVolume, np.ndarray]) -> np.ndarray:
    data = vol.data if isinstance(vol, LabelVolume) else np.asarray(vol)
    return data > 0


def count_components(mask: np.ndarray) -> int:
    _, n = ndimage.label(mask, structure=_STRUCT26)
    return int(n)


def neighbor_counts(mask: np.ndarray) -> np.ndarray:
    kernel = np.ones((3, 3, 3), dtype=np.int32)
    kernel[1, 1, 1] = 0
    counts = ndimage.convolve(mask.astype(np.int32), kernel, mode="constant", cval=0)
    return np.where(mask, counts, 0)


def _cube(padded: np.ndarray, z: int, y: int, x: int) -> np.ndarray:
    # padded has a 1-voxel border, so voxel (z, y, x) sits at (z+1, y+1, x+1)
    return padded[z:z + 3, y:y + 3, x:x + 3]


def _deletable(padded: np.ndarray, z: int, y: int, x: int) -> bool:
    cube = _cube(padded, z, y, x)
    if int(cube.sum()) - 1 <= 1:
        return False  # end point or isolated voxel
    return is_simple_point(cube)


def _directional_cleanup(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    removed = 0
    changed = True
    while changed:
        changed = False
        for dz, dy, dx in _DIRECTIONS:
            inner = padded[1:-1, 1:-1, 1:-1]
            neighbor = padded[1 + dz:padded.shape[0] - 1 + dz,
                              1 + dy:padded.shape[1] - 1 + dy,
                              1 + dx:padded.shape[2] - 1 + dx]
            border = inner & ~neighbor
            for z, y, x in np.argwhere(border):
                if not padded[z + 1, y + 1, x + 1]:
                    continue
                if _deletable(padded, z, y, x):
                    padded[z + 1, y + 1, x + 1] = False
                    removed += 1
                    changed = True
    if removed:
        logger.debug(f"Directional clean-up removed {removed} simple voxels")
    return padded[1:-1, 1:-1, 1:-1].copy()


def thin(vol: Union[LabelVolume, np.ndarray]) -> np.ndarray:
    """
    One-voxel-wide skeleton of the foreground as a (z, y, x) bool mask.
    Labels are collapsed to {0, 1} first.
    """
    mask = _as_mask(vol)
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)

    skel = np.asarray(skeletonize(mask.astype(np.uint8))) > 0
    skel &= mask

    # a component must never vanish: keep its first voxel in scan order
    labels, n = ndimage.label(mask, structure=_STRUCT26)
    kept = np.unique(labels[skel])
    missing = sorted(set(range(1, n + 1)) - set(int(k) for k in kept))
    for comp in missing:
        z, y, x = np.argwhere(labels == comp)[0]
        skel[z, y, x] = True

    skel = _directional_cleanup(skel)
    logger.debug(f"Thinned {int(mask.sum())} voxels to {int(skel.sum())} skeleton voxels")
    return skel


# ================= GRAPH EXTRACTION =================

def _xyz(zyx) -> Voxel:
    return int(zyx[2]), int(zyx[1]), int(zyx[0])


def extract_graph(skel: np.ndarray, transform: Optional[CoordTransform] = None) -> SkeletonGraph:
    skel = np.asarray(skel, dtype=bool)
    if not skel.any():
        return SkeletonGraph([], [], transform)

    degree = neighbor_counts(skel)
    shape = skel.shape

    def inside(z, y, x):
        return 0 <= z < shape[0] and 0 <= y < shape[1] and 0 <= x < shape[2]

    def neighbors(zyx):
        z, y, x = zyx
        for dz, dy, dx in _OFFSETS:
            nz, ny, nx = z + dz, y + dy, x + dx
            if inside(nz, ny, nx) and skel[nz, ny, nx]:
                yield (nz, ny, nx)

    # --- node voxel groups ---
    groups: List[List[Tuple[int, int, int]]] = []

    junction = skel & (degree >= 3)
    jlabels, nj = ndimage.label(junction, structure=_STRUCT26)
    for comp in range(1, nj + 1):
        groups.append([tuple(int(c) for c in v) for v in np.argwhere(jlabels == comp)])

    for v in np.argwhere(skel & (degree <= 1)):
        groups.append([tuple(int(c) for c in v)])

    # pure cycles: components with no node voxel get a breaker at their first voxel
    is_node_voxel = skel & (degree != 2)
    clabels, nc = ndimage.label(skel, structure=_STRUCT26)
    has_node = set(int(c) for c in np.unique(clabels[is_node_voxel]))
    for comp in range(1, nc + 1):
        if comp not in has_node:
            first = tuple(int(c) for c in np.argwhere(clabels == comp)[0])
            groups.append([first])
            logger.debug(f"Pure cycle component {comp}: breaker node at {_xyz(first)}")

    def representative(members):
        pts = np.array(members, dtype=np.float64)
        d = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        return members[int(np.argmin(d))]  # members are in scan order

    groups = [sorted(g) for g in groups]
    groups.sort(key=representative)

    node_of: Dict[Tuple[int, int, int], int] = {}
    nodes: List[SkeletonNode] = []

    def add_node(members) -> int:
        nid = len(nodes)
        rep = representative(members)
        coord = transform.to_normalized(_xyz(rep)) if transform else np.asarray(_xyz(rep), float)
        nodes.append(SkeletonNode(
            id=nid,
            voxel=_xyz(rep),
            coord=tuple(float(c) for c in coord),
            members=[_xyz(m) for m in members],
        ))
        for m in members:
            node_of[m] = nid
        return nid

    for g in groups:
        add_node(g)

    # --- edge tracing ---
    edges: List[SkeletonEdge] = []
    visited = set()
    direct_pairs = set()

    def add_edge(u, v, path):
        if not path:
            direct_pairs.add((min(u, v), max(u, v)))
        edges.append(SkeletonEdge(id=len(edges), u=u, v=v, path=[_xyz(p) for p in path]))

    def absorb(nid, voxels):
        node = nodes[nid]
        node.members = sorted(node.members + [_xyz(v) for v in voxels], key=lambda m: (m[2], m[1], m[0]))
        for v in voxels:
            node_of[v] = nid

    def trace(start_node, prev, cur):
        path = []
        while cur not in node_of:
            path.append(cur)
            visited.add(cur)
            nxt = [n for n in neighbors(cur) if n != prev]
            if not nxt:
                raise SkeletonError(f"chain broken at voxel {_xyz(cur)}")
            prev, cur = cur, nxt[0]
        end = node_of[cur]
        if end == start_node and len(path) < 3:
            # voxels bridging two members of one junction cluster belong to it
            absorb(start_node, path)
        elif end == start_node:
            # closed loop back to the same node: split at the middle voxel
            mid = len(path) // 2
            breaker = add_node([path[mid]])
            add_edge(start_node, breaker, path[:mid])
            add_edge(breaker, start_node, path[mid + 1:])
        else:
            add_edge(start_node, end, path)

    n_initial = len(nodes)
    for nid in range(n_initial):
        for m in sorted((v[2], v[1], v[0]) for v in nodes[nid].members):
            for n in neighbors(m):
                owner = node_of.get(n)
                if owner is not None:
                    if owner != nid:
                        pair = (min(nid, owner), max(nid, owner))
                        if pair not in direct_pairs:
                            direct_pairs.add(pair)
                            add_edge(pair[0], pair[1], [])
                    continue
                if n in visited:
                    continue
                trace(nid, m, n)

    graph = SkeletonGraph(nodes, edges, transform)
    graph.validate()
    logger.debug(
        f"Extracted graph: nodes={graph.num_nodes}, edges={graph.num_edges}, "
        f"voxels={graph.voxel_count()}"
    )
    return graph


def recover_labels(graph: SkeletonGraph, vol: LabelVolume) -> SkeletonGraph:
    node_labels = []
    for n in graph.nodes:
        label = vol.label_at(n.voxel)
        if label == 0:
            raise SkeletonError(f"node {n.id} at {n.voxel} lies on background")
        node_labels.append(label)

    edge_labels = []
    for e in graph.edges:
        if e.path:
            labels = [vol.label_at(p) for p in e.path]
        else:
            labels = [node_labels[e.u], node_labels[e.v]]
        if min(labels) == 0:
            raise SkeletonError(f"edge {e.id} path touches background")
        counts = np.bincount(labels)
        edge_labels.append(int(np.argmax(counts)))  # argmax keeps the smallest id on ties

    return graph.with_labels(node_labels, edge_labels)


def build_graph(vol: LabelVolume, transform: Optional[CoordTransform] = None,
                labeled: bool = True) -> SkeletonGraph:
    """thin -> extract_graph -> recover_labels."""
    transform = transform or make_transform(vol)
    graph = extract_graph(thin(vol), transform)
    if labeled:
        graph = recover_labels(graph, vol)
    return graph


# ================= GRAPH FILES =================

def save_graph(graph: SkeletonGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(graph.to_dict()))
    return path


def load_graph(path: Union[str, Path]) -> SkeletonGraph:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found: {path}")
    try:
        return SkeletonGraph.from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError) as e:
        raise SkeletonError(f"malformed graph file {path}: {e}") from e
