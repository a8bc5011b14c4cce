"""Shortest-path regression on synthetic graphs.

Graphs are 3D wraparound grids (plus directed and randomly pruned
variants), a taxi world and a box-pushing world.  Nodes are described by
noisy landmark distances padded with distractor features, and models
regress normalized shortest-path lengths between node pairs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .diffcore import Adam, make_generator
from .metrics import DistanceModel, Embedding, pair_model
from .norms import build_head

KINDS = ("grid3d", "grid3d_directed", "grid3d_randpruned", "taxi", "push")
SYMMETRIC_KINDS = ("grid3d", "taxi")
MOVES2D = ((-1, 0), (1, 0), (0, 1), (0, -1))


@dataclass
class Graph:
    n: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    directed: bool = True

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not (len(self.src) == len(self.dst) == len(self.weight)):
            raise ValueError("edge arrays differ in length")
        if np.any(self.weight <= 0):
            raise ValueError("edge weights must be positive")

    def csr(self):
        # parallel edges keep their smallest weight
        order = np.lexsort((self.weight, self.dst, self.src))
        s, d, w = self.src[order], self.dst[order], self.weight[order]
        keep = np.ones(len(s), dtype=bool)
        keep[1:] = (s[1:] != s[:-1]) | (d[1:] != d[:-1])
        return coo_matrix((w[keep], (s[keep], d[keep])), shape=(self.n, self.n)).tocsr()

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n)

    def is_strongly_connected(self) -> bool:
        return connected_components(self.csr(), directed=True, connection="strong")[0] == 1

    def to_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("source,target,weight\n")
            for s, d, w in zip(self.src, self.dst, self.weight):
                fh.write(f"{s},{d},{w!r}\n")


def _weights(rng, k):
    return rng.integers(1, 101, size=k) / 100.0


def largest_scc(graph: Graph) -> Graph:
    """Restrict to the largest strongly connected component, reindexing nodes."""
    n_comp, labels = connected_components(graph.csr(), directed=True, connection="strong")
    if n_comp == 1:
        return graph
    keep = np.argmax(np.bincount(labels))
    alive = labels == keep
    new_id = np.full(graph.n, -1)
    new_id[alive] = np.arange(alive.sum())
    e = alive[graph.src] & alive[graph.dst]
    if not alive.any():
        raise ValueError("empty strongly connected component")
    return Graph(int(alive.sum()), new_id[graph.src[e]], new_id[graph.dst[e]], graph.weight[e], graph.directed)


def _grid3d(size, rng, kind):
    idx = np.arange(size ** 3).reshape(size, size, size)
    src, dst, w = [], [], []
    for axis in range(3):
        nxt = np.roll(idx, -1, axis=axis)  # +1 along axis with wraparound
        fwd = _weights(rng, idx.size)
        src.append(idx.ravel()); dst.append(nxt.ravel()); w.append(fwd)
        if kind != "grid3d_directed":
            back = fwd if kind in ("grid3d", "grid3d_randpruned") else _weights(rng, idx.size)
            src.append(nxt.ravel()); dst.append(idx.ravel()); w.append(back)
    src, dst, w = (np.concatenate(a) for a in (src, dst, w))
    if kind == "grid3d_randpruned":
        # edges were appended direction-major: edge e belongs to direction e // n
        n = size ** 3
        direction = np.arange(len(src)) // n
        drop = np.argsort(rng.random((n, 6)), axis=1)[:, :3]
        pruned = np.zeros((n, 6), dtype=bool)
        np.put_along_axis(pruned, drop, True, axis=1)
        keep = ~pruned[src, direction]
        src, dst, w = src[keep], dst[keep], w[keep]
    return Graph(size ** 3, src, dst, w, directed=kind != "grid3d")


def _taxi(side, rng):
    """State ``(agent cell, passenger)``; passenger is a cell index or ``side**2`` (carried)."""
    cells = side * side
    P = cells + 1

    def node(a, p):
        return a * P + p

    src, dst = [], []
    for a in range(cells):
        r, c = divmod(a, side)
        for dr, dc in ((1, 0), (0, 1)):  # each undirected move once
            rr, cc = r + dr, c + dc
            if rr < side and cc < side:
                b = rr * side + cc
                for p in range(P):
                    src.append(node(a, p)); dst.append(node(b, p))
        src.append(node(a, a)); dst.append(node(a, cells))  # pickup, reversed by drop
    src, dst = np.array(src), np.array(dst)
    w = _weights(rng, len(src))
    return Graph(cells * P, np.concatenate([src, dst]), np.concatenate([dst, src]), np.concatenate([w, w]),
                 directed=False)


def _push(side, rng):
    """State ``(agent cell, box cell)`` with the two cells distinct.

    Moving into the box pushes it one cell further; if that cell is off the
    board the agent and box swap places instead.
    """
    cells = side * side
    node = {}
    for a in range(cells):
        for b in range(cells):
            if a != b:
                node[a, b] = len(node)
    src, dst = [], []
    for (a, b), u in node.items():
        r, c = divmod(a, side)
        for dr, dc in MOVES2D:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < side and 0 <= cc < side):
                continue
            t = rr * side + cc
            if t != b:
                nxt = (t, b)
            else:
                br, bc = rr + dr, cc + dc
                if 0 <= br < side and 0 <= bc < side:
                    nxt = (t, br * side + bc)
                else:
                    nxt = (b, a)  # swap at the wall
            src.append(u); dst.append(node[nxt])
    return Graph(len(node), src, dst, _weights(rng, len(src)), directed=True)


def build_graph(kind: str, size: int, seed: int = 0) -> Graph:
    if kind not in KINDS:
        raise ValueError(f"unknown graph kind {kind!r}")
    if size < 2:
        raise ValueError("size must be at least 2")
    rng = np.random.default_rng(seed)
    if kind.startswith("grid3d"):
        g = _grid3d(size, rng, kind)
    elif kind == "taxi":
        g = _taxi(size, rng)
    else:
        g = _push(size, rng)
    if kind in ("grid3d_randpruned", "push"):
        g = largest_scc(g)
    if g.n == 0:
        raise ValueError("empty strongly connected component")
    return g


def shortest_paths(graph: Graph, sources, targets=None) -> np.ndarray:
    """Exact lengths from each source to each target (rows x columns)."""
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    out = dijkstra(graph.csr(), directed=True, indices=sources)
    if targets is not None:
        out = out[:, np.atleast_1d(np.asarray(targets, dtype=np.int64))]
    if not np.all(np.isfinite(out)):
        raise ValueError("unreachable target: graph is not strongly connected")
    return out


def pair_lengths(graph: Graph, src, dst, chunk: int = 256) -> np.ndarray:
    """Lengths of individual ``(src[i], dst[i])`` pairs, one Dijkstra per distinct source."""
    src, dst = np.asarray(src), np.asarray(dst)
    out = np.empty(len(src))
    uniq, inv = np.unique(src, return_inverse=True)
    csr = graph.csr()
    for b in range(0, len(uniq), chunk):
        rows = dijkstra(csr, directed=True, indices=uniq[b:b + chunk])
        sel = (inv >= b) & (inv < b + chunk)
        out[sel] = rows[inv[sel] - b, dst[sel]]
    if not np.all(np.isfinite(out)):
        raise ValueError("unreachable target: graph is not strongly connected")
    return out


@dataclass
class NodeFeatures:
    values: np.ndarray
    landmarks: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g")


def landmark_features(graph: Graph, n_landmarks: int = 32, noise_sd: float = 0.2,
                      n_distractors: int = 96, seed: int = 0) -> NodeFeatures:
    """Standardized noisy distances to (and, if directed, from) random landmarks plus N(0, 1) distractors."""
    if n_landmarks > graph.n:
        raise ValueError("more landmarks than nodes")
    rng = np.random.default_rng(seed)
    lm = rng.choice(graph.n, size=n_landmarks, replace=False)
    csr = graph.csr()
    cols = [dijkstra(csr.T.tocsr(), directed=True, indices=lm).T]  # d(node, landmark)
    if graph.directed:
        cols.append(dijkstra(csr, directed=True, indices=lm).T)  # d(landmark, node)
    base = np.concatenate(cols, axis=1)
    if not np.all(np.isfinite(base)):
        raise ValueError("graph is not strongly connected")
    sd = base.std(axis=0)
    base = (base - base.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    base = base + rng.normal(0.0, noise_sd, size=base.shape)
    distract = rng.normal(0.0, 1.0, size=(graph.n, n_distractors))
    return NodeFeatures(np.concatenate([base, distract], axis=1), lm)


@dataclass
class PathDataset:
    features: np.ndarray
    train: np.ndarray  # rows (src, dst, length)
    test: np.ndarray
    scale: float

    def to_csv(self, path_prefix) -> None:
        for name in ("train", "test"):
            arr = getattr(self, name)
            with Path(f"{path_prefix}_{name}.csv").open("w") as fh:
                fh.write("src,dst,length\n")
                for s, d, v in arr:
                    fh.write(f"{int(s)},{int(d)},{v!r}\n")


def sample_pairs(n: int, k: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """``k`` distinct ordered pairs of distinct nodes."""
    total = n * (n - 1)
    if k > total:
        raise ValueError(f"only {total} pairs available")
    flat = rng.choice(total, size=k, replace=False)
    s, r = np.divmod(flat, n - 1)
    return s, r + (r >= s)


def make_dataset(graph: Graph, features: NodeFeatures, train_size: int, pool_size: int = 30_000,
                 test_size: int = 5_000, seed: int = 0) -> PathDataset:
    """Pool of random pairs scaled to mean length 50; the first ``test_size`` are the test set."""
    if train_size <= 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    pool_size = min(pool_size, graph.n * (graph.n - 1))
    if train_size > pool_size - test_size:
        raise ValueError(f"train_size {train_size} exceeds the {pool_size - test_size} available pairs")
    s, d = sample_pairs(graph.n, pool_size, rng)
    length = pair_lengths(graph, s, d)
    scale = 50.0 / length.mean()
    rows = np.stack([s, d, length * scale], axis=1)
    test, rest = rows[:test_size], rows[test_size:]
    train = rest[rng.choice(len(rest), size=train_size, replace=False)]
    return PathDataset(features.values, train, test, scale)


MODEL_KINDS = ("mahalanobis", "widenorm", "deepnorm_icnn", "deepnorm", "mlp")


def graph_model(kind: str, feat_dim: int, asymmetric: bool, phi_depth: int = 1, width: int = 128,
                dtype=torch.float32, seed: int = 0) -> DistanceModel:
    emb = Embedding(feat_dim, phi_depth, width, dtype=dtype, seed=seed)
    d = emb.out_dim
    if kind == "mlp":
        return pair_model(emb, width, 3, dtype=dtype, seed=seed + 1)
    if kind == "mahalanobis":
        desc = {"kind": "MahalanobisNorm", "out_dim": 128}
    elif kind == "widenorm":
        desc = {"kind": "NeuralMetricHead", "pieces": 5, "pool": "maxmean",
                "base": {"kind": "WideNorm", "n_components": 32, "component_dim": 32,
                         "asymmetric": asymmetric, "pool": "mean"}}
    elif kind == "deepnorm_icnn":
        desc = {"kind": "DeepNorm", "widths": [width] * 3, "activation": "relu", "pool": "mean"}
    elif kind == "deepnorm":
        desc = {"kind": "NeuralMetricHead", "pieces": 5, "pool": "maxmean",
                "base": {"kind": "DeepNorm", "widths": [width] * 3, "activation": "maxrelu", "pool": "mean"}}
    else:
        raise ValueError(f"unknown model {kind!r}")
    return DistanceModel(emb, build_head({**desc, "in_dim": d}, dtype=dtype, seed=seed + 1))


@dataclass
class GraphRun:
    model: DistanceModel
    test_mse: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_test_mse(self) -> float:
        return self.test_mse[-1]


def _mse(model, feats, rows, chunk=8192):
    with torch.no_grad():
        err = 0.0
        for b in range(0, len(rows), chunk):
            r = rows[b:b + chunk]
            pred = model(feats[r[:, 0].long()], feats[r[:, 1].long()])
            err += float(((pred - r[:, 2]) ** 2).sum())
    return err / len(rows)


def train_graph_model(model: DistanceModel, data: PathDataset, epochs: int = 1000, batch: int = 256,
                      lr: float = 1e-3, decay_every: int = 250, decay: float = 5.0, seed: int = 0) -> GraphRun:
    """Squared-error regression; the learning rate is divided by ``decay`` every ``decay_every`` epochs."""
    start = time.perf_counter()
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(data.features, dtype=dtype)
    train = torch.as_tensor(data.train, dtype=dtype)
    test = torch.as_tensor(data.test, dtype=dtype)
    opt = Adam(model.parameters(), lr=lr)
    g = make_generator(seed)
    run = GraphRun(model)
    for epoch in range(epochs):
        opt.lr = lr / decay ** (epoch // decay_every)
        perm = torch.randperm(len(train), generator=g)
        total = 0.0
        for b in range(0, len(perm), batch):
            r = train[perm[b:b + batch]]
            pred = model(feats[r[:, 0].long()], feats[r[:, 1].long()])
            loss = ((pred - r[:, 2]) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(r)
        run.train_mse.append(total / len(train))
        run.test_mse.append(_mse(model, feats, test))
    run.wall_time = time.perf_counter() - start
    return run


@dataclass
class GraphConfig:
    kind: str = "grid3d"
    size: int = 10
    train_size: int = 20_000
    pool_size: int = 30_000
    test_size: int = 5_000
    phi_depth: int = 1
    epochs: int = 1000
    batch: int = 256
    lr: float = 1e-3
    decay_every: int = 250


def run_graph_experiment(cfg: GraphConfig, model_kind: str, seed: int = 0) -> GraphRun:
    """Build graph, features and dataset from ``seed`` and train one model."""
    graph = build_graph(cfg.kind, cfg.size, seed)
    feats = landmark_features(graph, seed=seed + 1)
    data = make_dataset(graph, feats, cfg.train_size, cfg.pool_size, cfg.test_size, seed=seed + 2)
    model = graph_model(model_kind, feats.dim, graph.directed, cfg.phi_depth, seed=seed + 3)
    return train_graph_model(model, data, cfg.epochs, cfg.batch, cfg.lr, cfg.decay_every, seed=seed + 4)
