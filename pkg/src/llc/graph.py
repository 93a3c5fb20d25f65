"""Graph containers, file ingestion, splitting and synthetic graphs."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from llc.errors import FormatError


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of a root seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True, eq=False)
class Graph:
    """Node-classification graph.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``
    (directed pairs ``(src, dst)`` when ``symmetric`` is false).
    ``neighborhoods[v]`` is the sorted self-inclusive neighbour set of ``v``.
    """

    n_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    symmetric: bool = True
    neighborhoods: tuple = field(init=False, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = int(self.n_nodes)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise FormatError("edge endpoint outside [0, n_nodes)")
        edges = edges[edges[:, 0] != edges[:, 1]]
        if self.symmetric:
            edges = np.sort(edges, axis=1)
        edges = np.unique(edges, axis=0) if edges.size else np.zeros((0, 2), dtype=np.int64)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != n:
            raise FormatError(f"features must have {n} rows, got shape {features.shape}")
        if labels.shape != (n,):
            raise FormatError(f"labels must have {n} entries, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise FormatError(f"label outside [0, {self.n_classes})")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

        src, dst = edges[:, 0], edges[:, 1]
        if self.symmetric:
            src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        loops = np.arange(n)
        src = np.concatenate([src, loops])
        dst = np.concatenate([dst, loops])
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        bounds = np.searchsorted(dst, np.arange(n + 1))
        neigh = tuple(src[bounds[v]:bounds[v + 1]] for v in range(n))
        object.__setattr__(self, "neighborhoods", neigh)
        object.__setattr__(self, "_edge_src", src)
        object.__setattr__(self, "_edge_dst", dst)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def message_edges(self):
        """``(src, dst)`` arrays over every neighbourhood entry, self-loops included, sorted by dst."""
        return self._edge_src, self._edge_dst

    @cached_property
    def neighbor_sum(self) -> sp.csr_matrix:
        """0/1 adjacency summing each node's neighbours, self excluded."""
        src, dst = self.message_edges
        keep = src != dst
        vals = np.ones(int(keep.sum()))
        return sp.csr_matrix((vals, (dst[keep], src[keep])), shape=(self.n_nodes, self.n_nodes))

    @cached_property
    def neighbor_count(self) -> np.ndarray:
        """``N x 1`` neighbour counts (self excluded), with 1 for isolated nodes."""
        src, dst = self.message_edges
        deg = np.bincount(dst[src != dst], minlength=self.n_nodes).astype(np.float64)
        return np.maximum(deg, 1.0)[:, None]

    @cached_property
    def neighbor_mean(self) -> sp.csr_matrix:
        """Row-stochastic matrix averaging each node's neighbours, self excluded.

        Rows of nodes without neighbours are zero.
        """
        src, dst = self.message_edges
        keep = src != dst
        src, dst = src[keep], dst[keep]
        deg = np.bincount(dst, minlength=self.n_nodes).astype(np.float64)
        vals = 1.0 / deg[dst]
        return sp.csr_matrix((vals, (dst, src)), shape=(self.n_nodes, self.n_nodes))

    def same_as(self, other: "Graph") -> bool:
        return (self.n_nodes == other.n_nodes and self.n_classes == other.n_classes
                and self.symmetric == other.symmetric
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    def with_features(self, features) -> "Graph":
        return Graph(self.n_nodes, self.edges, features, self.labels, self.n_classes, self.symmetric)


@dataclass(frozen=True, eq=False)
class DataSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            idx = np.sort(np.asarray(getattr(self, name), dtype=np.int64))
            if idx.size == 0:
                raise ValueError(f"{name} split is empty")
            object.__setattr__(self, name, idx)
        a, b, c = set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())
        if a & b or a & c or b & c:
            raise ValueError("train/val/test splits overlap")

    def to_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    def same_as(self, other: "DataSplit") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("train", "val", "test"))


# ---------------------------------------------------------------- files


def _read_lines(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path) as fh:
        return fh.read().splitlines()


def load_dataset(directory, symmetric=True, normalize=False):
    """Read ``edges.tsv``, ``features.csv``, ``labels.csv`` and optional ``splits.json``.

    Returns ``(graph, split)`` where ``split`` is ``None`` without a splits file.
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")

    rows = []
    width = None
    for lineno, line in enumerate(_read_lines(root / "features.csv"), start=1):
        if not line.strip():
            continue
        try:
            vals = [float(x) for x in line.split(",")]
        except ValueError:
            raise FormatError(f"features.csv line {lineno}: non-numeric value") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise FormatError(f"features.csv line {lineno}: expected {width} values, got {len(vals)}")
        rows.append(vals)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), width or 0)
    n = features.shape[0]

    labels = []
    for lineno, line in enumerate(_read_lines(root / "labels.csv"), start=1):
        if not line.strip():
            continue
        try:
            y = int(line.strip())
        except ValueError:
            raise FormatError(f"labels.csv line {lineno}: not an integer: {line!r}") from None
        if y < 0:
            raise FormatError(f"labels.csv line {lineno}: label {y} out of range")
        labels.append(y)
    if len(labels) != n:
        raise FormatError(f"labels.csv has {len(labels)} labels for {n} feature rows")

    edges = []
    for lineno, line in enumerate(_read_lines(root / "edges.tsv"), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split("\t")
        if len(parts) != 2:
            raise FormatError(f"edges.tsv line {lineno}: expected 'src<TAB>dst'")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"edges.tsv line {lineno}: non-integer node id") from None
        if not (0 <= u < n and 0 <= v < n):
            raise FormatError(f"edges.tsv line {lineno}: node id outside [0, {n})")
        edges.append((u, v))

    n_classes = max(labels) + 1 if labels else 0
    graph = Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features,
                  np.array(labels, dtype=np.int64), n_classes, symmetric)
    if normalize:
        graph = row_normalize_features(graph)

    split = None
    split_path = root / "splits.json"
    if split_path.is_file():
        try:
            raw = json.loads(split_path.read_text())
            split = DataSplit(*(np.asarray(raw[k], dtype=np.int64) for k in ("train", "val", "test")))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"splits.json: {exc}") from None
        for part in (split.train, split.val, split.test):
            if part.min() < 0 or part.max() >= n:
                raise FormatError("splits.json: node id out of range")
    return graph, split


def save_dataset(graph: Graph, directory, split: DataSplit | None = None):
    """Write ``graph`` (and ``split``) in the format read by :func:`load_dataset`."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w") as fh:
        fh.write("# src\tdst\n")
        for u, v in graph.edges.tolist():
            fh.write(f"{u}\t{v}\n")
    with open(root / "features.csv", "w") as fh:
        for row in graph.features.tolist():
            fh.write(",".join(repr(x) for x in row) + "\n")
    with open(root / "labels.csv", "w") as fh:
        fh.write("".join(f"{y}\n" for y in graph.labels.tolist()))
    if split is not None:
        (root / "splits.json").write_text(json.dumps(split.to_dict()))


# ---------------------------------------------------------------- preprocessing


def row_normalize_features(graph: Graph) -> Graph:
    norms = np.abs(graph.features).sum(axis=1, keepdims=True)
    feats = np.divide(graph.features, norms, out=graph.features.copy(), where=norms > 0)
    return graph.with_features(feats)


def _allocate(n, ratios):
    # every bin gets one node first, the remainder goes by largest fractional part
    target = np.maximum(np.asarray(ratios) * n - 1.0, 0.0)
    rest = n - len(ratios)
    if target.sum() > 0:
        target = target * rest / target.sum()
    counts = np.floor(target).astype(int)
    short = rest - counts.sum()
    order = np.argsort(-(target - counts), kind="stable")
    counts[order[:short]] += 1
    return counts + 1


def split_nodes(graph: Graph, ratios=(0.6, 0.2, 0.2), seed=0) -> DataSplit:
    """Per-class stratified random split into train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = substream(seed, "split")
    parts = ([], [], [])
    for c in range(graph.n_classes):
        nodes = np.flatnonzero(graph.labels == c)
        if nodes.size == 0:
            continue
        if nodes.size < 3:
            raise ValueError(f"class {c} has {nodes.size} nodes; at least 3 are needed to stratify")
        nodes = rng.permutation(nodes)
        counts = _allocate(nodes.size, ratios)
        start = 0
        for part, k in zip(parts, counts):
            part.append(nodes[start:start + k])
            start += k
    return DataSplit(*(np.concatenate(p) for p in parts))


def generate_sbm(communities, nodes_per_community, p_in, p_out, feature_dim,
                 feature_noise, seed=0) -> Graph:
    """Stochastic block model with noisy one-hot community features."""
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if feature_dim < communities:
        raise ValueError("feature_dim must be at least the number of communities")
    if communities < 1 or nodes_per_community < 1:
        raise ValueError("need at least one community with at least one node")
    rng = np.random.default_rng(seed)
    n = communities * nodes_per_community
    labels = np.repeat(np.arange(communities), nodes_per_community)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    features = np.zeros((n, feature_dim))
    features[np.arange(n), labels] = 1.0
    if feature_noise > 0:
        features = features + feature_noise * rng.standard_normal((n, feature_dim))
    return Graph(n, edges, features, labels, communities)
