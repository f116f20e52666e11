"""Embedding ingestion, density clustering, and one-per-cluster sampling.

The clustering stack is a self-contained HDBSCAN: exact pairwise
distances (n is a few thousand, O(n^2) is trivial), core/mutual
reachability distances, a Prim minimum spanning tree, the single-linkage
hierarchy, and condensed-tree stability selection.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core_model import GoldLabel

MAGIC = b"VCE1"


class DimensionMismatch(ValueError):
    def __init__(self, row):
        super().__init__(f"vector dimension mismatch at row {row}")
        self.row = row


class NonFinite(ValueError):
    def __init__(self, row):
        super().__init__(f"non-finite vector entry at row {row}")
        self.row = row


class DuplicateId(ValueError):
    def __init__(self, id_):
        super().__init__(f"duplicate frame id: {id_!r}")
        self.id = id_


class TooFewPoints(ValueError):
    pass


class MissingLabel(KeyError):
    def __init__(self, frame_id):
        super().__init__(frame_id)
        self.frame_id = frame_id


class DegenerateData(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    ids: list[str]
    vectors: np.ndarray  # (n, d) float32

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise DimensionMismatch(0)
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("ids/vectors length mismatch")
        if not np.all(np.isfinite(self.vectors)):
            bad = int(np.argwhere(~np.isfinite(self.vectors).all(axis=1))[0][0])
            raise NonFinite(bad)
        seen = set()
        for id_ in self.ids:
            if id_ in seen:
                raise DuplicateId(id_)
            seen.add(id_)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ClusteringParams:
    min_cluster_size: int = 5
    min_samples: int = 5
    metric: str = "euclidean_on_l2_normalized"  # or "euclidean_raw"
    selection: str = "excess_of_mass"  # or "leaf"
    noise_policy: str = "exclude"  # or "singleton_clusters"

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.min_samples > self.min_cluster_size:
            raise ValueError("min_samples must not exceed min_cluster_size")
        if self.metric not in ("euclidean_on_l2_normalized", "euclidean_raw"):
            raise ValueError(f"unknown metric: {self.metric!r}")
        if self.selection not in ("excess_of_mass", "leaf"):
            raise ValueError(f"unknown selection: {self.selection!r}")
        if self.noise_policy not in ("exclude", "singleton_clusters"):
            raise ValueError(f"unknown noise_policy: {self.noise_policy!r}")


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # per-point int, -1 for noise
    n_clusters: int
    stabilities: dict[int, float] = field(default_factory=dict)


@dataclass
class SampleManifest:
    chosen: dict[int, str]  # cluster id -> frame id
    seed: int
    strategy: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "strategy": self.strategy,
                "clusters": [
                    {"cluster": cid, "frame_id": self.chosen[cid]}
                    for cid in sorted(self.chosen)
                ],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SampleManifest":
        obj = json.loads(text)
        return cls(
            chosen={rec["cluster"]: rec["frame_id"] for rec in obj["clusters"]},
            seed=obj["seed"],
            strategy=obj["strategy"],
        )


# --- I/O -------------------------------------------------------------------

def load_embeddings(path, format: str = "jsonl") -> EmbeddingMatrix:
    if format == "jsonl":
        return _load_jsonl(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown embeddings format: {format!r}")


def _load_jsonl(path) -> EmbeddingMatrix:
    ids, rows = [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            vec = rec["vec"]
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise DimensionMismatch(i)
            if not all(math.isfinite(v) for v in vec):
                raise NonFinite(i)
            ids.append(rec["id"])
            rows.append(vec)
    return EmbeddingMatrix(ids=ids, vectors=np.asarray(rows, dtype=np.float32))


def _load_binary(path) -> EmbeddingMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic bytes: {magic!r}")
        n, d = struct.unpack("<II", fh.read(8))
        ids, rows = [], []
        for i in range(n):
            (id_len,) = struct.unpack("<H", fh.read(2))
            ids.append(fh.read(id_len).decode("utf-8"))
            buf = fh.read(4 * d)
            if len(buf) != 4 * d:
                raise DimensionMismatch(i)
            vec = np.frombuffer(buf, dtype="<f4")
            if not np.all(np.isfinite(vec)):
                raise NonFinite(i)
            rows.append(vec)
    return EmbeddingMatrix(ids=ids, vectors=np.asarray(rows, dtype=np.float32))


def write_embeddings_binary(e: EmbeddingMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", e.n, e.dim))
        for id_, vec in zip(e.ids, e.vectors):
            raw = id_.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


# --- distances -------------------------------------------------------------

def pairwise_distances(e: EmbeddingMatrix, metric: str = "euclidean_on_l2_normalized") -> np.ndarray:
    vecs = e.vectors.astype(np.float64)
    if metric == "euclidean_on_l2_normalized":
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        vecs = vecs / norms
    sq = np.sum(vecs * vecs, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (vecs @ vecs.T)
    np.clip(d2, 0.0, None, out=d2)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, 0.0)
    return (dist + dist.T) / 2.0


def core_distances(dist: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to each point's min_samples-th nearest neighbor (self
    excluded)."""
    n = dist.shape[0]
    if n < min_samples + 1:
        raise TooFewPoints(f"need at least {min_samples + 1} points, got {n}")
    ordered = np.sort(dist, axis=1)  # column 0 is the self distance (0)
    return ordered[:, min_samples]


def mutual_reachability(
    e: EmbeddingMatrix, min_samples: int, metric: str = "euclidean_on_l2_normalized"
) -> np.ndarray:
    """Symmetric matrix of max(core(a), core(b), d(a, b)); diagonal 0."""
    dist = pairwise_distances(e, metric)
    core = core_distances(dist, min_samples)
    mreach = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mreach, 0.0)
    return mreach


# --- minimum spanning tree -------------------------------------------------

def minimum_spanning_tree(distances: np.ndarray) -> list[tuple[int, int, float]]:
    """Prim's algorithm over a dense symmetric matrix; edges returned as
    (a, b, weight) with a < b, sorted ascending by weight."""
    n = distances.shape[0]
    if n < 2:
        raise TooFewPoints("need at least 2 points for a spanning tree")
    in_tree = np.zeros(n, dtype=bool)
    best = distances[0].copy()
    src = np.zeros(n, dtype=np.int64)
    in_tree[0] = True
    best[0] = np.inf
    edges = []
    for _ in range(n - 1):
        j = int(np.argmin(np.where(in_tree, np.inf, best)))
        a, b = int(src[j]), j
        if a > b:
            a, b = b, a
        edges.append((a, b, float(best[j])))
        in_tree[j] = True
        improved = distances[j] < best
        best = np.where(improved, distances[j], best)
        src = np.where(improved, j, src)
        best[in_tree] = np.inf
    edges.sort(key=lambda e: (e[2], e[0], e[1]))
    return edges


# --- single-linkage hierarchy and condensed tree ---------------------------

def _single_linkage(edges: list[tuple[int, int, float]], n: int):
    """Build the dendrogram from ascending MST edges. Returns a dict
    node -> (left, right, distance, size) with internal node ids
    n .. 2n-2."""
    parent = list(range(n))

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    node_of = list(range(n))  # component root -> dendrogram node id
    size_of = [1] * n
    merges = {}
    next_node = n
    for a, b, w in edges:
        ra, rb = find(a), find(b)
        merges[next_node] = (node_of[ra], node_of[rb], w, size_of[ra] + size_of[rb])
        parent[rb] = ra
        node_of[ra] = next_node
        size_of[ra] += size_of[rb]
        next_node += 1
    return merges


@dataclass
class CondensedTree:
    # rows: (parent_cluster, child, lambda, size); child < n_points means a point
    rows: list[tuple[int, int, float, int]]
    n_points: int
    root: int
    birth_lambda: dict[int, float]
    children_of: dict[int, list[int]]
    parent_of: dict[int, int]


def _condense_tree(merges, n: int, min_cluster_size: int) -> CondensedTree:
    root_cluster = n
    rows = []
    birth = {root_cluster: 0.0}
    children_of = {root_cluster: []}
    parent_of = {}
    next_cluster = n + 1

    def subtree_points(node):
        out = []
        stack = [node]
        while stack:
            v = stack.pop()
            if v < n:
                out.append(v)
            else:
                left, right, _, _ = merges[v]
                stack.extend((left, right))
        return out

    def node_size(v):
        return 1 if v < n else merges[v][3]

    if not merges:
        return CondensedTree(rows, n, root_cluster, birth, children_of, parent_of)

    sl_root = max(merges)
    stack = [(sl_root, root_cluster)]
    while stack:
        node, cluster = stack.pop()
        left, right, dist, _ = merges[node]
        lam = 1.0 / dist if dist > 0.0 else math.inf
        s_left, s_right = node_size(left), node_size(right)
        if s_left >= min_cluster_size and s_right >= min_cluster_size:
            for child_node, s in ((left, s_left), (right, s_right)):
                cid = next_cluster
                next_cluster += 1
                rows.append((cluster, cid, lam, s))
                birth[cid] = lam
                children_of.setdefault(cluster, []).append(cid)
                children_of.setdefault(cid, [])
                parent_of[cid] = cluster
                stack.append((child_node, cid))
        elif s_left >= min_cluster_size:
            for p in subtree_points(right):
                rows.append((cluster, p, lam, 1))
            stack.append((left, cluster))
        elif s_right >= min_cluster_size:
            for p in subtree_points(left):
                rows.append((cluster, p, lam, 1))
            stack.append((right, cluster))
        else:
            for p in subtree_points(left) + subtree_points(right):
                rows.append((cluster, p, lam, 1))
    return CondensedTree(rows, n, root_cluster, birth, children_of, parent_of)


def _cluster_stabilities(tree: CondensedTree) -> dict[int, float]:
    stability = {c: 0.0 for c in tree.children_of}
    for parent, _child, lam, size in tree.rows:
        stability[parent] += size * (lam - tree.birth_lambda[parent])
    return stability


def _select_clusters(tree: CondensedTree, stability: dict[int, float], selection: str) -> list[int]:
    candidates = [c for c in tree.children_of if c != tree.root]
    if not candidates:
        return []
    if selection == "leaf":
        return sorted(c for c in candidates if not tree.children_of[c])
    # excess of mass: walk children-before-parents, keep a cluster when its
    # own stability beats the best selection among its descendants
    selected = {}
    subtree_stability = {}
    for c in sorted(candidates, reverse=True):
        child_sum = sum(subtree_stability[ch] for ch in tree.children_of[c])
        if tree.children_of[c] and child_sum > stability[c]:
            selected[c] = False
            subtree_stability[c] = child_sum
        else:
            selected[c] = True
            subtree_stability[c] = stability[c]
            # deselect everything below
            stack = list(tree.children_of[c])
            while stack:
                d = stack.pop()
                selected[d] = False
                stack.extend(tree.children_of[d])
    return sorted(c for c, keep in selected.items() if keep)


def _label_points(tree: CondensedTree, chosen: list[int]) -> np.ndarray:
    labels = np.full(tree.n_points, -1, dtype=np.int64)
    label_of = {c: i for i, c in enumerate(chosen)}
    chosen_set = set(chosen)
    for parent, child, _lam, _size in tree.rows:
        if child >= tree.n_points:
            continue
        c = parent
        while c is not None:
            if c in chosen_set:
                labels[child] = label_of[c]
                break
            c = tree.parent_of.get(c)
    return labels


def hdbscan_cluster(e: EmbeddingMatrix, p: ClusteringParams = ClusteringParams()) -> ClusterAssignment:
    n = e.n
    if n < 2:
        raise TooFewPoints("need at least 2 points to cluster")
    mreach = mutual_reachability(e, p.min_samples, p.metric)
    edges = minimum_spanning_tree(mreach)
    merges = _single_linkage(edges, n)
    tree = _condense_tree(merges, n, p.min_cluster_size)
    stability = _cluster_stabilities(tree)
    chosen = _select_clusters(tree, stability, p.selection)
    if chosen:
        labels = _label_points(tree, chosen)
        stabilities = {i: float(stability[c]) for i, c in enumerate(chosen)}
    elif n >= p.min_cluster_size:
        # No sub-cluster survived condensation: the data is one homogeneous
        # cluster (e.g. all points identical).
        labels = np.zeros(n, dtype=np.int64)
        stabilities = {0: float(stability.get(tree.root, 0.0))}
    else:
        labels = np.full(n, -1, dtype=np.int64)
        stabilities = {}
    n_clusters = len(stabilities)
    if p.noise_policy == "singleton_clusters":
        for idx in np.flatnonzero(labels == -1):
            labels[idx] = n_clusters
            stabilities[n_clusters] = 0.0
            n_clusters += 1
    return ClusterAssignment(labels=labels, n_clusters=n_clusters, stabilities=stabilities)


# --- sampling and downstream -----------------------------------------------

def stratified_sample(
    e: EmbeddingMatrix,
    assignment: ClusterAssignment,
    strategy: str = "seeded_random",
    seed: int = 0,
) -> SampleManifest:
    """One frame per non-noise cluster."""
    if assignment.n_clusters < 1:
        raise ValueError("assignment has no clusters to sample from")
    if strategy not in ("seeded_random", "medoid"):
        raise ValueError(f"unknown strategy: {strategy!r}")
    chosen = {}
    if strategy == "medoid":
        dist = pairwise_distances(e)
    for cid in range(assignment.n_clusters):
        members = np.flatnonzero(assignment.labels == cid)
        if strategy == "seeded_random":
            rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, cid])
            pick = int(members[rng.integers(len(members))])
        else:
            sub = dist[np.ix_(members, members)]
            totals = sub.sum(axis=1)
            best = totals.min()
            tied = [int(members[i]) for i in np.flatnonzero(totals == best)]
            pick = min(tied, key=lambda i: e.ids[i])
        chosen[cid] = e.ids[pick]
    return SampleManifest(chosen=chosen, seed=seed, strategy=strategy)


def character_distribution(
    labels: dict[str, GoldLabel], sample: SampleManifest
) -> dict[str, int]:
    """Per-character occurrence counts over the sampled frames; each frame
    contributes at most once per character."""
    counts: dict[str, int] = {}
    for cid in sorted(sample.chosen):
        frame_id = sample.chosen[cid]
        if frame_id not in labels:
            raise MissingLabel(frame_id)
        for name in labels[frame_id].characters:
            counts[name] = counts.get(name, 0) + 1
    return counts


def pca_project_2d(e: EmbeddingMatrix) -> np.ndarray:
    if e.n < 2 or e.dim < 2:
        raise TooFewPoints("need n >= 2 and dim >= 2")
    x = e.vectors.astype(np.float64)
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0):
        raise DegenerateData("all points identical")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # deterministic sign: largest-magnitude loading is positive
    for i in range(2):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    return centered @ components.T
