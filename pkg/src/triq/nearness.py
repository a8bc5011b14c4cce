"""Metric nearness: problem generators, triangle fixing and neural solvers.

Given a non-negative, zero-diagonal matrix ``D`` the goal is a matrix ``X``
satisfying every triangle inequality with small distortion
``||X - D||_F / ||D||_F``.  :func:`triangle_fix` solves this by Dykstra's
cyclic projection onto the single-constraint half-spaces; the neural solvers
fit a metric-mode distance model whose output can never violate the triangle
inequality.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .axioms import count_triangle_violations


@dataclass
class NearnessProblem:
    D: np.ndarray
    mode: str = "symmetric"
    seed: int | None = None
    raw: np.ndarray | None = None  # asymmetric generator: matrix before the mod-10 rescale

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=np.float64)
        if self.mode not in ("symmetric", "asymmetric"):
            raise ValueError(f"unknown mode {self.mode!r}")
        n, m = self.D.shape
        if n != m:
            raise ValueError("data matrix must be square")
        if np.any(np.diag(self.D) != 0):
            raise ValueError("data matrix must have a zero diagonal")
        if np.any(self.D < 0):
            raise ValueError("data matrix must be non-negative")
        if self.mode == "symmetric" and not np.array_equal(self.D, self.D.T):
            raise ValueError("symmetric problem with non-symmetric data")

    @property
    def n(self) -> int:
        return self.D.shape[0]


@dataclass
class NearnessSolution:
    X: np.ndarray
    distortion: float
    violations: int
    tol: float
    solver: str
    iterations: int
    history: list = field(default_factory=list)
    wall_time: float = 0.0


def generate_symmetric(n: int, seed: int) -> NearnessProblem:
    """Uniform(0, 5) matrix plus its transpose, plus symmetric Uniform(0, 1) noise."""
    if n < 3:
        raise ValueError("need at least 3 points")
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.0, 5.0, size=(n, n))
    noise = np.triu(rng.uniform(0.0, 1.0, size=(n, n)), 1)
    D = A + A.T + noise + noise.T
    np.fill_diagonal(D, 0.0)
    return NearnessProblem(D, "symmetric", seed)


def lattice_distances(side: int, rng: np.random.Generator) -> np.ndarray:
    """All-pairs shortest paths on a directed 4-neighbour lattice.

    Every directed edge gets its own weight ``exp(Uniform(-1, 1))``.
    """
    idx = np.arange(side * side).reshape(side, side)
    src, dst = [], []
    for a, b in ((idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])):
        src += [a.ravel(), b.ravel()]
        dst += [b.ravel(), a.ravel()]
    src, dst = np.concatenate(src), np.concatenate(dst)
    w = np.exp(rng.uniform(-1.0, 1.0, size=src.size))
    G = coo_matrix((w, (src, dst)), shape=(side * side,) * 2).tocsr()
    dist = dijkstra(G, directed=True)
    if not np.all(np.isfinite(dist)):
        raise ValueError("lattice is not strongly connected")
    return dist


def generate_asymmetric(n: int, seed: int) -> NearnessProblem:
    """Noisy shortest-path distances of a random directed lattice.

    The smallest square lattice holding ``n`` nodes is built and its first
    ``n`` nodes kept.  Uniform(0, 4) noise is added and values are taken
    modulo 10; ``problem.raw`` keeps the matrix before the modulo.
    """
    if n < 3:
        raise ValueError("need at least 3 points")
    rng = np.random.default_rng(seed)
    side = math.isqrt(n - 1) + 1
    dist = lattice_distances(side, rng)[:n, :n]
    raw = dist + rng.uniform(0.0, 4.0, size=(n, n))
    np.fill_diagonal(raw, 0.0)
    D = np.mod(raw, 10.0)
    np.fill_diagonal(D, 0.0)
    return NearnessProblem(D, "asymmetric", seed, raw=raw)


def distortion(X, D) -> float:
    X = np.asarray(X, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if X.shape != D.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {D.shape}")
    denom = np.linalg.norm(D)
    if denom == 0:
        raise ValueError("distortion undefined for an all-zero data matrix")
    return float(np.linalg.norm(X - D) / denom)


# ---------------------------------------------------------------------------
# triangle fixing


@njit(cache=True)
def _sweep_symmetric(X, lam):
    n = X.shape[0]
    change = 0.0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            for k in range(i + 1, n):
                if k == j:
                    continue
                # constraint X[i,k] <= X[i,j] + X[j,k]
                v = X[i, k] - X[i, j] - X[j, k]
                old = lam[i, j, k]
                new = old + v / 3.0
                if new < 0.0:
                    new = 0.0
                delta = new - old
                if delta != 0.0:
                    lam[i, j, k] = new
                    X[i, k] -= delta
                    X[k, i] = X[i, k]
                    X[i, j] += delta
                    X[j, i] = X[i, j]
                    X[j, k] += delta
                    X[k, j] = X[j, k]
                    if abs(delta) > change:
                        change = abs(delta)
    return change


@njit(cache=True)
def _sweep_asymmetric(X, lam):
    n = X.shape[0]
    change = 0.0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            for k in range(n):
                if k == i or k == j:
                    continue
                v = X[i, k] - X[i, j] - X[j, k]
                old = lam[i, j, k]
                new = old + v / 3.0
                if new < 0.0:
                    new = 0.0
                delta = new - old
                if delta != 0.0:
                    lam[i, j, k] = new
                    X[i, k] -= delta
                    X[i, j] += delta
                    X[j, k] += delta
                    if abs(delta) > change:
                        change = abs(delta)
    return change


def triangle_fix(problem: NearnessProblem, max_iters: int = 400, tol: float = 1e-10,
                 count_tol: float = 0.0) -> NearnessSolution:
    """Dykstra-style triangle fixing.

    Each sweep visits every triangle constraint ``X[i,k] <= X[i,j] + X[j,k]``
    in lexicographic ``(i, j, k)`` order (``i < k`` in symmetric mode, where
    both orientations of a pair move together), restores that constraint's
    stored correction and projects.  Stops after ``max_iters`` sweeps or when
    the largest single correction in a sweep falls below ``tol``.
    """
    start = time.perf_counter()
    X = problem.D.copy()
    n = problem.n
    lam = np.zeros((n, n, n))
    sweep = _sweep_symmetric if problem.mode == "symmetric" else _sweep_asymmetric
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        change = sweep(X, lam)
        np.maximum(X, 0.0, out=X)
        history.append(change)
        if change < tol:
            break
    return NearnessSolution(
        X=X, distortion=distortion(X, problem.D),
        violations=count_triangle_violations(X, count_tol), tol=count_tol,
        solver="tf", iterations=it, history=history,
        wall_time=time.perf_counter() - start)


def shift_to_metric(X: np.ndarray) -> tuple[np.ndarray, float]:
    """Add the largest triangle violation to every off-diagonal entry.

    ``X[i,k] + e <= X[i,j] + X[j,k] + 2e`` whenever the violation is at most
    ``e``, so the shifted matrix has no violations.
    """
    X = np.asarray(X, dtype=np.float64)
    eps = max(max_triangle_violation(X), 0.0)
    Y = X + eps
    np.fill_diagonal(Y, 0.0)
    return Y, eps


def max_triangle_violation(X: np.ndarray) -> float:
    n = X.shape[0]
    worst = -np.inf
    off = ~np.eye(n, dtype=bool)
    for j in range(n):
        slack = X - (X[:, j:j + 1] + X[j:j + 1, :])
        mask = off.copy()
        mask[j, :] = False
        mask[:, j] = False
        if mask.any():
            worst = max(worst, slack[mask].max())
    return float(worst)


# ---------------------------------------------------------------------------
# neural metric nearness


def nearness_head(kind: str, asymmetric: bool, width: int = 512, components: int = 128,
                  component_dim: int = 48, pieces: int = 5) -> tuple[int, dict]:
    """Embedding size and head descriptor for each neural solver."""
    if kind == "euclidean":
        return 2 * width, {"kind": "EuclideanNorm"}
    if kind == "widenorm":
        base = {"kind": "WideNorm", "n_components": components, "component_dim": component_dim,
                "asymmetric": asymmetric, "pool": "mean"}
    elif kind == "deepnorm":
        base = {"kind": "DeepNorm", "widths": [width, width], "activation": "maxrelu", "pool": "mean"}
    else:
        raise ValueError(f"unknown neural solver {kind!r}")
    return width, {"kind": "NeuralMetricHead", "base": base, "pieces": pieces, "pool": "maxmean"}


@dataclass
class NearnessSchedule:
    epochs: int = 1500
    lrs: tuple = (1e-3, 3e-4, 1e-4)
    batch: int = 1000
    width: int = 512
    components: int = 128
    component_dim: int = 48
    pieces: int = 5


def train_neural_nearness(problem: NearnessProblem, kind: str = "deepnorm",
                          schedule: NearnessSchedule | None = None, seed: int = 0,
                          count_tol: float = 0.0, dtype=torch.float32) -> NearnessSolution:
    """Fit ``d(i, j) = head(phi(j) - phi(i))`` to every off-diagonal entry of ``D``.

    Nodes are indices into a learned embedding table.  The learning rate
    steps through ``schedule.lrs`` in equal chunks of the epoch budget.
    """
    from .diffcore import Adam, make_generator
    from .metrics import DistanceModel, EmbeddingTable
    from .norms import build_head

    sch = schedule or NearnessSchedule()
    start = time.perf_counter()
    n = problem.n
    dim, desc = nearness_head(kind, problem.mode == "asymmetric", sch.width, sch.components,
                              sch.component_dim, sch.pieces)
    model = DistanceModel(EmbeddingTable(n, dim, dtype=dtype, seed=seed),
                          build_head({**desc, "in_dim": dim}, dtype=dtype, seed=seed + 1))
    opt = Adam(model.parameters(), lr=sch.lrs[0])
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    src, dst = torch.as_tensor(ii), torch.as_tensor(jj)
    target = torch.as_tensor(problem.D[ii, jj], dtype=dtype)
    g = make_generator(seed + 2)
    chunk = max(1, math.ceil(sch.epochs / len(sch.lrs)))
    history = []
    for epoch in range(sch.epochs):
        opt.lr = sch.lrs[min(epoch // chunk, len(sch.lrs) - 1)]
        perm = torch.randperm(len(target), generator=g)
        total = 0.0
        for b in range(0, len(perm), sch.batch):
            idx = perm[b:b + sch.batch]
            pred = model(src[idx], dst[idx])
            loss = ((pred - target[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(target))
    X = solution_matrix(model, n)
    return NearnessSolution(
        X=X, distortion=distortion(X, problem.D), violations=count_triangle_violations(X, count_tol),
        tol=count_tol, solver=kind, iterations=sch.epochs, history=history,
        wall_time=time.perf_counter() - start)


def solution_matrix(model, n: int) -> np.ndarray:
    """Full ``n x n`` matrix of model distances, evaluated in float64."""
    from .axioms import as_float64
    from .metrics import pairwise_naive

    m64 = as_float64(model)
    idx = torch.arange(n)
    return pairwise_naive(m64, idx, idx).numpy()
