"""Induced distances ``d(x, y) = head(phi(y) - phi(x))`` and pairwise matrices."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffcore import make_generator, uniform_init
from .norms import Head, MLPHead, NeuralMetricHead, WideNorm, _linear


class Embedding(nn.Module):
    """Fully connected ReLU stack; ``depth == 0`` is the identity.

    ReLUs sit between layers only, so the embedding is unconstrained in sign.
    """

    def __init__(self, in_dim: int, depth: int = 1, width: int = 128, dtype=torch.float64, seed=None):
        super().__init__()
        g = make_generator(seed)
        self.in_dim, self.depth = int(in_dim), int(depth)
        self.out_dim = self.in_dim if depth == 0 else int(width)
        dims = [self.in_dim] + [int(width)] * self.depth
        self.layers = nn.ModuleList([_linear(a, b, g, dtype) for a, b in zip(dims, dims[1:])])

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class EmbeddingTable(nn.Module):
    """Learned vector per node index; the same as a linear map on one-hot inputs."""

    def __init__(self, n: int, dim: int, dtype=torch.float64, seed=None):
        super().__init__()
        g = make_generator(seed)
        self.in_dim, self.out_dim = int(n), int(dim)
        self.table = nn.Parameter(uniform_init((n, dim), n, g, dtype=dtype))

    def forward(self, idx):
        if idx.dtype.is_floating_point:  # one-hot rows
            return idx @ self.table
        return self.table[idx]


class DistanceModel(nn.Module):
    """``metric`` mode: ``head(phi(y) - phi(x))``; ``pair`` mode: MLP on ``(phi(x), phi(y))``."""

    def __init__(self, embedding: nn.Module, head: Head, mode: str = "metric"):
        super().__init__()
        if mode not in ("metric", "pair"):
            raise ValueError(f"unknown mode {mode!r}")
        expected = embedding.out_dim * (2 if mode == "pair" else 1)
        if head.in_dim != expected:
            raise ValueError(f"head expects {head.in_dim} inputs, embedding gives {expected}")
        self.embedding, self.head, self.mode = embedding, head, mode

    def combine(self, ex, ey):
        if self.mode == "metric":
            return self.head(ey - ex)
        return self.head(torch.cat((ex, ey), dim=-1))

    def forward(self, x, y):
        return self.combine(self.embedding(x), self.embedding(y))


def distance(model: DistanceModel, x, y) -> torch.Tensor:
    return model(x, y)


def pairwise_naive(model: DistanceModel, X, Y) -> torch.Tensor:
    """Entry ``(i, j)`` is ``d(X_i, Y_j)``, one row of head evaluations at a time."""
    with torch.no_grad():
        ex, ey = model.embedding(X), model.embedding(Y)
        rows = [model.combine(ex[i].expand_as(ey), ey) for i in range(ex.shape[0])]
    return torch.stack(rows)


def _fast_head(head):
    if isinstance(head, WideNorm):
        return head, None
    if isinstance(head, NeuralMetricHead) and isinstance(head.base, WideNorm):
        return head.base, head
    return None, None


def pairwise_widenorm_fast(model: DistanceModel, X, Y) -> torch.Tensor:
    """Pairwise Wide Norm distances via ``|a - b|^2 = |a|^2 + |b|^2 - 2 a.b`` per component.

    Each component projects every embedding once, so the cost is linear in
    ``n + m`` plus one ``n x m`` Gram product per component.  Works for a
    symmetric WideNorm head and for a Neural Metric over one.
    """
    wide, nm = _fast_head(model.head)
    if wide is None or model.mode != "metric":
        raise ValueError("fast pairwise path needs a metric-mode WideNorm head")
    if wide.asymmetric:
        raise ValueError("fast pairwise path does not apply to asymmetric WideNorm; use pairwise_naive")
    with torch.no_grad():
        a = wide.project(model.embedding(X)).transpose(0, 1)  # (k, n, m)
        b = wide.project(model.embedding(Y)).transpose(0, 1)
        sq = (a * a).sum(-1).unsqueeze(2) + (b * b).sum(-1).unsqueeze(1) - 2 * a @ b.transpose(1, 2)
        comp = sq.clamp_min(0.0).sqrt().permute(1, 2, 0)  # (n, m, k)
        if nm is not None:
            return nm.pool(nm.concave(comp))
        return wide.pool(comp)


@dataclass
class DistanceMatrix:
    values: np.ndarray
    symmetric: bool = False
    tol: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("distance matrix must be 2-D")
        if self.symmetric and not np.array_equal(self.values, self.values.T):
            raise ValueError("matrix flagged symmetric is not symmetric")

    def to_csv(self, path) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path, symmetric: bool = False) -> "DistanceMatrix":
        return cls(np.loadtxt(Path(path), delimiter=",", ndmin=2), symmetric)


def distance_matrix(model: DistanceModel, X, symmetric: bool = False) -> DistanceMatrix:
    values = pairwise_naive(model, X, X).detach().cpu().double().numpy()
    if symmetric:
        values = 0.5 * (values + values.T)
    return DistanceMatrix(values, symmetric)


def pair_model(embedding: nn.Module, hidden: int = 128, depth: int = 3, dtype=torch.float64, seed=None) -> DistanceModel:
    """Unconstrained baseline: MLP over the concatenated embeddings."""
    return DistanceModel(embedding, MLPHead(2 * embedding.out_dim, hidden, depth, dtype=dtype, seed=seed), "pair")


# ---------------------------------------------------------------------------
# four-cycle graph: a metric no Euclidean embedding can reproduce


def four_cycle_distances() -> np.ndarray:
    """Shortest paths of the unit-length cycle A-B-D-C-A (nodes ordered A, B, C, D)."""
    return np.array([[0, 1, 1, 2], [1, 0, 2, 1], [1, 2, 0, 1], [2, 1, 1, 0]], dtype=np.float64)


FIGURE1_HEADS = {
    "euclidean": {"kind": "EuclideanNorm"},
    "deepnorm": {"kind": "DeepNorm", "widths": [32, 32], "activation": "relu", "pool": "mean"},
    "widenorm": {"kind": "WideNorm", "n_components": 8, "component_dim": 2, "pool": "maxmean"},
}


def fit_embedding(D: np.ndarray, head: dict, dim: int, seed: int = 0, steps: int = 3000,
                  lr: float = 1e-2) -> tuple[float, DistanceModel]:
    """Full-batch fit of ``head(phi(j) - phi(i))`` to every off-diagonal ``D[i, j]``; returns the MSE."""
    from .diffcore import Adam
    from .norms import build_head

    n = D.shape[0]
    model = DistanceModel(EmbeddingTable(n, dim, seed=seed), build_head({**head, "in_dim": dim}, seed=seed + 1))
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    src, dst = torch.as_tensor(ii), torch.as_tensor(jj)
    target = torch.as_tensor(D[ii, jj])
    opt = Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        loss = ((model(src, dst) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        final = float(((model(src, dst) - target) ** 2).mean())
    return final, model


def figure1(dims=(2, 4, 8, 16), restarts: int = 5, seed: int = 0, steps: int = 1000) -> dict:
    """Best MSE over the 12 ordered pairs of the four-cycle for each head.

    The Euclidean head is tried in every dimension of ``dims``; the norm
    heads only in the plane.
    """
    D = four_cycle_distances()
    out = {}
    for name, head in FIGURE1_HEADS.items():
        trial_dims = dims if name == "euclidean" else (2,)
        out[name] = min(fit_embedding(D, head, d, seed + 100 * r, steps)[0]
                        for d in trial_dims for r in range(restarts))
    return out
