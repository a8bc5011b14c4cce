"""Random 2D norms from convex hulls, their datasets, training and contour tracing.

A bounded convex polygon containing the origin is the unit ball of an
asymmetric norm, its Minkowski gauge.  Heads are fit to noisy samples of the
gauge and scored on points of the unit ball.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import ConvexHull
from scipy.stats import truncnorm

from .diffcore import Adam, make_generator
from .norms import DeepNorm, MahalanobisNorm, MLPHead, WideNorm


@dataclass
class HullNorm:
    """Polygon with counterclockwise ``vertices``; its gauge is the norm."""

    vertices: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("need at least 3 vertices in the plane")
        self.vertices = v
        nxt = np.roll(v, -1, axis=0)
        # outward edge normals of a ccw polygon, and offsets n.v
        self.normals = np.stack([nxt[:, 1] - v[:, 1], v[:, 0] - nxt[:, 0]], axis=1)
        self.offsets = np.einsum("ij,ij->i", self.normals, v)
        if np.any(self.offsets <= 1e-12 * np.abs(self.normals).sum(1)):
            raise ValueError("origin is not strictly inside the polygon")
        cross = (nxt[:, 0] - v[:, 0]) * (np.roll(v, -2, axis=0)[:, 1] - nxt[:, 1]) \
            - (nxt[:, 1] - v[:, 1]) * (np.roll(v, -2, axis=0)[:, 0] - nxt[:, 0])
        if np.any(cross < -1e-12):
            raise ValueError("vertices are not a convex counterclockwise polygon")

    def __call__(self, x) -> np.ndarray:
        return gauge(self, x)

    def to_csv(self, path) -> None:
        np.savetxt(path, self.vertices, delimiter=",", fmt="%.17g", header="x,y", comments="")


def gauge(hull: HullNorm, x) -> np.ndarray:
    """``inf{a > 0 : x / a in hull}``.

    The ray through ``x`` leaves the polygon through the edge maximising
    ``n_i . x / c_i``, where ``n_i . y = c_i`` is the edge's supporting line,
    so the gauge is that maximum (clamped at 0 for ``x = 0``).
    """
    x = np.asarray(x, dtype=np.float64)
    r = (x @ hull.normals.T) / hull.offsets
    return np.maximum(r.max(axis=-1), 0.0)


def square_hull() -> HullNorm:
    return HullNorm(np.array([[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]]), symmetric=True)


def diamond_hull() -> HullNorm:
    return HullNorm(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]), symmetric=True)


def _point_cloud(rng: np.random.Generator, symmetric: bool) -> np.ndarray:
    clusters = []
    for _ in range(rng.integers(3, 11)):
        n_i = rng.integers(5, 51)
        mu = rng.uniform(-0.5, 0.5, size=2)
        sigma = rng.uniform(0.2, 0.6)
        clusters.append(mu + sigma * truncnorm.rvs(-2.0, 2.0, size=(n_i, 2), random_state=rng))
    pts = np.concatenate(clusters)
    if symmetric:
        pts = pts[pts[:, 0] > 0]
        return np.concatenate([pts, -pts])  # already mean zero
    return pts - pts.mean(axis=0)


def generate_hull(seed: int, symmetric: bool = False, retries: int = 10) -> HullNorm:
    """Convex hull of a random clustered point cloud, recentred on the origin."""
    rng = np.random.default_rng(seed)
    for _ in range(retries + 1):
        pts = _point_cloud(rng, symmetric)
        if len(pts) < 3:
            continue
        try:
            hull = ConvexHull(pts)
        except Exception:  # degenerate cloud
            continue
        v = pts[hull.vertices]  # counterclockwise in 2D
        try:
            return HullNorm(v, symmetric)
        except ValueError:
            continue
    raise RuntimeError(f"could not generate a hull around the origin after {retries} retries")


def make_hull(kind: str, seed: int = 0, symmetric: bool = False) -> HullNorm:
    if kind == "square":
        return square_hull()
    if kind == "diamond":
        return diamond_hull()
    if kind == "random":
        return generate_hull(seed, symmetric)
    raise ValueError(f"unknown hull {kind!r}")


@dataclass
class NormDataset:
    test_x: np.ndarray
    test_y: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    train_idx: np.ndarray

    def to_csv(self, path) -> None:
        rows = [("test", *p, t) for p, t in zip(self.test_x, self.test_y)]
        rows += [("train", *p, t) for p, t in zip(self.train_x, self.train_y)]
        with Path(path).open("w") as fh:
            fh.write("split,x,y,target\n")
            for s, a, b, t in rows:
                fh.write(f"{s},{a!r},{b!r},{t!r}\n")


def sample_dataset(hull: HullNorm, train_size: int = 128, seed: int = 0, n_test: int = 500) -> NormDataset:
    """Unit-ball test points and a perturbed subset of them for training."""
    if not 0 < train_size <= n_test:
        raise ValueError(f"train_size must be in [1, {n_test}]")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * math.pi, size=n_test)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    test_x = u / gauge(hull, u)[:, None]
    idx = rng.choice(n_test, size=train_size, replace=False)
    eta = rng.uniform(0.85, 1.15, size=train_size)
    return NormDataset(test_x, np.ones(n_test), test_x[idx] * eta[:, None], eta, idx)


MODELS = ("maha", "deepnorm", "widenorm", "mlp")


def make_model(kind: str, seed: int = 0, depth: int = 3, width: int = 50,
               components: int = 50, component_dim: int = 2):
    if kind == "maha":
        return MahalanobisNorm(2, 2, seed=seed)
    if kind == "deepnorm":
        return DeepNorm(2, [width] * depth, activation="relu", pool="mean", seed=seed)
    if kind == "widenorm":
        return WideNorm(2, components, component_dim, pool="maxmean", seed=seed)
    if kind == "mlp":
        return MLPHead(2, width, depth, seed=seed)
    raise ValueError(f"unknown model {kind!r}")


@dataclass
class Norm2dResult:
    model: torch.nn.Module
    best_test_mse: float
    best_epoch: int
    curve: list = field(default_factory=list)  # (epoch, train mse, test mse)


def mse(model, x, y) -> float:
    with torch.no_grad():
        pred = model(torch.as_tensor(x, dtype=torch.float64))
    return float(((pred.numpy() - y) ** 2).mean())


def train_norm2d(model, dataset: NormDataset, epochs: int = 5000, batch: int = 16, lr: float = 1e-3,
                 eval_every: int = 100, seed: int = 0) -> Norm2dResult:
    """Minibatch MSE regression; keeps the parameters with the best test MSE.

    Test MSE is checked every ``eval_every`` epochs and after the last one.
    """
    if len(dataset.train_y) == 0:
        raise ValueError("empty training set")
    x = torch.as_tensor(dataset.train_x, dtype=torch.float64)
    y = torch.as_tensor(dataset.train_y, dtype=torch.float64)
    opt = Adam(model.parameters(), lr=lr)
    g = make_generator(seed)
    best = (math.inf, -1, None)
    curve = []
    for epoch in range(1, epochs + 1):
        perm = torch.randperm(len(y), generator=g)
        for b in range(0, len(y), batch):
            idx = perm[b:b + batch]
            loss = ((model(x[idx]) - y[idx]) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        if epoch % eval_every == 0 or epoch == epochs:
            test = mse(model, dataset.test_x, dataset.test_y)
            curve.append((epoch, mse(model, dataset.train_x, dataset.train_y), test))
            if test < best[0]:
                best = (test, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    return Norm2dResult(model, best[0], best[1], curve)


def export_contours(model, levels=(0.5, 1.0, 1.5, 2.0), resolution: int = 720,
                    iters: int = 60, r_max: float = 1e6) -> dict:
    """Level sets ``{x : model(x) = L}`` traced along ``resolution`` rays.

    Each ray is bracketed by doubling from radius 1 and then bisected
    ``iters`` times.  Rays on which the level is never crossed (including
    rays starting above it) are dropped, so a level may come back empty.
    """
    theta = np.linspace(0.0, 2 * math.pi, resolution, endpoint=False)
    u = torch.as_tensor(np.stack([np.cos(theta), np.sin(theta)], axis=1), dtype=torch.float64)

    def f(r):
        with torch.no_grad():
            return model(u * r[:, None]).to(torch.float64)

    out = {}
    zero = f(torch.zeros(resolution, dtype=torch.float64))
    for level in levels:
        lo = torch.zeros(resolution, dtype=torch.float64)
        hi = torch.ones(resolution, dtype=torch.float64)
        while True:
            below = f(hi) < level
            if not below.any() or hi.max() >= r_max:
                break
            lo = torch.where(below, hi, lo)
            hi = torch.where(below, hi * 2, hi)
        ok = (f(hi) >= level) & (zero < level)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = f(mid) < level
            lo = torch.where(below, mid, lo)
            hi = torch.where(below, hi, mid)
        r = 0.5 * (lo + hi)
        out[float(level)] = (u * r[:, None])[ok].numpy()
    return out


def save_contours(contours: dict, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("level,x,y\n")
        for level, pts in contours.items():
            for a, b in pts:
                fh.write(f"{level!r},{a!r},{b!r}\n")
