"""Cell-graph data model, k-NN construction, synthetic data, and node removal.

Graphs are immutable after construction: all arrays are marked read-only so
they can be shared freely across concurrent workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class CellGraph:
    """Undirected spatial graph: node coordinates, node features, edge set.

    `edges` is an (E, 2) int array with each unordered pair stored once as
    (u, v) with u < v, sorted lexicographically.
    """

    id: str
    coords: np.ndarray      # (V, 2) float64
    features: np.ndarray    # (V, d) float64
    edges: np.ndarray       # (E, 2) int64, u < v
    label: int

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = coords.shape[0]
        if features.shape[0] != n:
            raise ValueError(f"feature rows ({features.shape[0]}) != node count ({n})")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite coordinates")
        if features.size and not np.all(np.isfinite(features)):
            raise ValueError("non-finite features")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-edges are not allowed")
            edges = normalize_edges(edges)
        if self.label < 0:
            raise ValueError("label must be nonnegative")
        self.coords = _readonly(coords)
        self.features = _readonly(features)
        self.edges = _readonly(edges)

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency as float64."""
        n = self.num_nodes
        a = np.zeros((n, n))
        if self.edges.size:
            u, v = self.edges[:, 0], self.edges[:, 1]
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a

    def equals(self, other: "CellGraph") -> bool:
        return (
            self.id == other.id
            and self.label == other.label
            and self.coords.shape == other.coords.shape
            and self.features.shape == other.features.shape
            and self.edges.shape == other.edges.shape
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
        )


def normalize_edges(edges: np.ndarray) -> np.ndarray:
    """Orient every pair as (min, max), drop duplicates, sort lexicographically."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return edges
    lo = edges.min(axis=1)
    hi = edges.max(axis=1)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return pairs


@dataclass(eq=False)
class Dataset:
    """A list of graphs with class count, split tags, and optional node labels."""

    graphs: list[CellGraph]
    num_classes: int
    split: list[str]
    ground_truth_importance: list[np.ndarray | None] | None = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.split) != len(self.graphs):
            raise ValueError("one split tag per graph required")
        for tag in self.split:
            if tag not in SPLITS:
                raise ValueError(f"unknown split tag {tag!r}")
        for g in self.graphs:
            if g.label >= self.num_classes:
                raise ValueError(f"graph {g.id}: label {g.label} >= num_classes")
        if self.ground_truth_importance is not None:
            if len(self.ground_truth_importance) != len(self.graphs):
                raise ValueError("one ground-truth entry per graph required")
            gts = []
            for g, gt in zip(self.graphs, self.ground_truth_importance):
                if gt is None:
                    gts.append(None)
                    continue
                gt = np.asarray(gt, dtype=np.int64)
                if gt.shape != (g.num_nodes,):
                    raise ValueError(f"graph {g.id}: ground-truth length mismatch")
                if gt.size and not np.all((gt == 0) | (gt == 1)):
                    raise ValueError(f"graph {g.id}: ground truth must be binary")
                gts.append(_readonly(gt))
            self.ground_truth_importance = gts

    def indices(self, split: str) -> list[int]:
        return [i for i, tag in enumerate(self.split) if tag == split]

    def subset(self, split: str) -> list[CellGraph]:
        return [self.graphs[i] for i in self.indices(split)]

    def ground_truth_for(self, index: int) -> np.ndarray | None:
        if self.ground_truth_importance is None:
            return None
        return self.ground_truth_importance[index]

    def equals(self, other: "Dataset") -> bool:
        if (
            self.num_classes != other.num_classes
            or self.split != other.split
            or len(self.graphs) != len(other.graphs)
        ):
            return False
        if not all(a.equals(b) for a, b in zip(self.graphs, other.graphs)):
            return False
        a_gt = self.ground_truth_importance
        b_gt = other.ground_truth_importance
        if (a_gt is None) != (b_gt is None):
            return False
        if a_gt is not None:
            for x, y in zip(a_gt, b_gt):
                if (x is None) != (y is None):
                    return False
                if x is not None and not np.array_equal(x, y):
                    return False
        return True


@dataclass
class SyntheticConfig:
    """Knobs for the planted-motif cell-graph generator."""

    num_graphs: int = 200
    nodes_per_graph_range: tuple[int, int] = (40, 60)
    k: int = 5
    feature_dim: int = 8
    motif_size: int = 8
    motif_feature_shift: float = 2.0
    coordinate_noise: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.nodes_per_graph_range
        if self.num_graphs < 1:
            raise ValueError("num_graphs must be positive")
        if lo < 2 or hi < lo:
            raise ValueError("invalid nodes_per_graph_range")
        if self.motif_size >= lo:
            raise ValueError("motif_size must be smaller than the smallest graph")
        if self.k >= lo or self.k < 1:
            raise ValueError("k must satisfy 1 <= k < min nodes per graph")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.motif_size < 1:
            raise ValueError("motif_size must be positive")
        if not np.isfinite(self.motif_feature_shift):
            raise ValueError("motif_feature_shift must be finite")
        if self.coordinate_noise < 0:
            raise ValueError("coordinate_noise must be nonnegative")


def knn_build(points: np.ndarray, k: int) -> np.ndarray:
    """Symmetric union of each node's k nearest neighbors (Euclidean).

    Distance ties break toward the smaller node index.  Returns a normalized
    (E, 2) edge array.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = points.shape[0]
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite coordinates")
    if k < 1:
        raise ValueError("k must be positive")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    diff = points[:, None, :] - points[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist2, np.inf)
    # stable sort keeps equal distances in ascending index order
    order = np.argsort(dist2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    dst = order.reshape(-1)
    return normalize_edges(np.stack([src, dst], axis=1))


def remove_nodes(g: CellGraph, victims) -> CellGraph:
    """Induced subgraph on the complement of `victims`, indices compacted."""
    victims = np.asarray(sorted(set(int(v) for v in victims)), dtype=np.int64)
    n = g.num_nodes
    if victims.size:
        if victims.min() < 0 or victims.max() >= n:
            raise ValueError("victim index out of range")
    keep_mask = np.ones(n, dtype=bool)
    keep_mask[victims] = False
    keep = np.nonzero(keep_mask)[0]
    relabel = -np.ones(n, dtype=np.int64)
    relabel[keep] = np.arange(keep.size)
    if g.edges.size:
        ok = keep_mask[g.edges[:, 0]] & keep_mask[g.edges[:, 1]]
        edges = relabel[g.edges[ok]]
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    return CellGraph(
        id=g.id,
        coords=g.coords[keep],
        features=g.features[keep],
        edges=edges,
        label=g.label,
    )


def fraction_to_count(fraction: float, n: int) -> int:
    """floor(fraction * n), tolerant of binary float error in grid fractions.

    Products like 0.7 * 90 fall a few ulps below their exact integer value;
    the 1e-9 nudge keeps 5% grid fractions exact for any realistic n.
    """
    return int(math.floor(fraction * n + 1e-9))


def top_fraction_nodes(imp, fraction: float, direction: str) -> np.ndarray:
    """Indices of the floor(fraction * V) highest or lowest scored nodes.

    `imp` may be a NodeImportanceMap or a raw score array.  Score ties break
    toward the smaller node index.  Returns a sorted index array.
    """
    scores = np.asarray(getattr(imp, "scores", imp), dtype=np.float64)
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if direction not in ("most", "least"):
        raise ValueError("direction must be 'most' or 'least'")
    n = scores.shape[0]
    count = fraction_to_count(fraction, n)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    key = -scores if direction == "most" else scores
    order = np.argsort(key, kind="stable")
    return np.sort(order[:count])


def ranked_nodes(scores: np.ndarray, direction: str) -> np.ndarray:
    """Full node ranking by score (ties toward smaller index)."""
    scores = np.asarray(scores, dtype=np.float64)
    key = -scores if direction == "most" else scores
    return np.argsort(key, kind="stable")


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Two-class cell-graph dataset with a planted feature-shift motif.

    Every graph contains a tight spatial cluster of `motif_size` nodes;
    in class-1 graphs those nodes additionally have their first feature
    shifted by `motif_feature_shift`, and are marked in the ground truth.
    With shift 0 the two class distributions are identical by construction.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    lo, hi = config.nodes_per_graph_range
    graphs: list[CellGraph] = []
    gts: list[np.ndarray] = []
    split: list[str] = []
    n_train = int(round(config.num_graphs * 0.6))
    n_val = int(round(config.num_graphs * 0.2))
    for i in range(config.num_graphs):
        n = int(rng.integers(lo, hi + 1))
        label = i % 2
        m = config.motif_size
        center = rng.uniform(0.25, 0.75, size=2)
        cluster = center + config.coordinate_noise * rng.standard_normal((m, 2))
        background = rng.uniform(0.0, 1.0, size=(n - m, 2))
        coords = np.concatenate([cluster, background], axis=0)
        features = rng.standard_normal((n, config.feature_dim))
        gt = np.zeros(n, dtype=np.int64)
        if label == 1:
            features[:m, 0] += config.motif_feature_shift
            gt[:m] = 1
        perm = rng.permutation(n)
        coords = coords[perm]
        features = features[perm]
        gt = gt[perm]
        edges = knn_build(coords, config.k)
        graphs.append(
            CellGraph(id=f"g{i:04d}", coords=coords, features=features,
                      edges=edges, label=label)
        )
        gts.append(gt)
        if i < n_train:
            split.append("train")
        elif i < n_train + n_val:
            split.append("val")
        else:
            split.append("test")
    return Dataset(graphs=graphs, num_classes=2, split=split,
                   ground_truth_importance=gts)


# -- serialization -----------------------------------------------------------


def dataset_to_dict(ds: Dataset) -> dict:
    out = {"num_classes": ds.num_classes, "graphs": []}
    for i, g in enumerate(ds.graphs):
        entry = {
            "id": g.id,
            "label": int(g.label),
            "nodes": [
                {"x": float(x), "y": float(y), "features": [float(f) for f in row]}
                for (x, y), row in zip(g.coords, g.features)
            ],
            "edges": [[int(u), int(v)] for u, v in g.edges],
            "split": ds.split[i],
        }
        gt = ds.ground_truth_for(i)
        if gt is not None:
            entry["importance_gt"] = [int(b) for b in gt]
        out["graphs"].append(entry)
    return out


def dataset_from_dict(payload: dict) -> Dataset:
    try:
        num_classes = int(payload["num_classes"])
        raw_graphs = payload["graphs"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed dataset payload: {exc}") from exc
    graphs, split, gts = [], [], []
    any_gt = False
    for idx, entry in enumerate(raw_graphs):
        try:
            nodes = entry["nodes"]
            coords = np.array([[nd["x"], nd["y"]] for nd in nodes], dtype=np.float64)
            coords = coords.reshape(-1, 2)
            widths = {len(nd["features"]) for nd in nodes}
            if len(widths) > 1:
                raise ValueError("inconsistent feature widths across nodes")
            features = np.array([nd["features"] for nd in nodes], dtype=np.float64)
            if features.size == 0:
                features = features.reshape(len(nodes), 0)
            g = CellGraph(
                id=str(entry["id"]),
                coords=coords,
                features=features,
                edges=np.array(entry.get("edges", []), dtype=np.int64).reshape(-1, 2),
                label=int(entry["label"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed graph entry {idx}: {exc}") from exc
        graphs.append(g)
        split.append(entry.get("split", "test"))
        gt = entry.get("importance_gt")
        if gt is not None:
            any_gt = True
            gts.append(np.asarray(gt, dtype=np.int64))
        else:
            gts.append(None)
    return Dataset(
        graphs=graphs,
        num_classes=num_classes,
        split=split,
        ground_truth_importance=gts if any_gt else None,
    )


def save_graphs(ds: Dataset, path) -> None:
    payload = json.dumps(dataset_to_dict(ds), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(payload + "\n")


def load_graphs(path) -> Dataset:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed dataset file {path}: {exc}") from exc
    return dataset_from_dict(payload)
