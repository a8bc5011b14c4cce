"""Sampled checks of norm, metric and convexity axioms.

Norm-style axioms (``N1``-``N5``, ``C1``, ``nonneg``) take a function of one
batch of vectors; metric axioms (``M1``-``M4``) take a function of two
batches.  A violation is recorded when the excess, divided by
``max(1, |right-hand side|)``, exceeds ``tol``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

NORM_AXIOMS = ("nonneg", "N1", "N2", "N3", "N4", "N5", "C1")
METRIC_AXIOMS = ("M1", "M2", "M3", "M4")
HOMOGENEITY_SCALES = (0.0, 0.5, 1.0, 2.0, 10.0)


@dataclass
class AxiomReport:
    axiom: str
    samples: int
    violations: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def merge(self, other: "AxiomReport") -> "AxiomReport":
        if (other.axiom, other.tol) != (self.axiom, self.tol):
            raise ValueError("can only merge reports of the same axiom and tolerance")
        return AxiomReport(self.axiom, self.samples + other.samples,
                           self.violations + other.violations, max(self.worst, other.worst), self.tol)


def gaussian_sampler(dim: int, scale: float = 1.0) -> Callable:
    def sample(rng: np.random.Generator, k: int) -> np.ndarray:
        return rng.normal(0.0, scale, size=(k, dim))
    return sample


def as_float64(f):
    """Float64 copy of a torch module; other callables pass through."""
    if isinstance(f, torch.nn.Module):
        return copy.deepcopy(f).double().eval()
    return f


def _caller(f):
    f = as_float64(f)

    def call(*arrays):
        args = [torch.as_tensor(np.asarray(a), dtype=torch.float64) for a in arrays]
        with torch.no_grad():
            out = f(*args)
        return np.asarray(out.detach().numpy() if isinstance(out, torch.Tensor) else out, dtype=np.float64)
    return call


def _report(axiom, excess, rhs, tol) -> AxiomReport:
    rel = np.asarray(excess, dtype=np.float64) / np.maximum(1.0, np.abs(rhs))
    bad = rel > tol
    worst = float(max(rel.max(initial=0.0), 0.0))
    return AxiomReport(axiom, int(rel.size), int(bad.sum()), worst, float(tol))


def check_axiom(target, axiom: str, sampler: Callable, n_samples: int = 10_000,
                tol: float = 1e-9, seed: int = 0) -> AxiomReport:
    """Sample the quantified statement of ``axiom`` and count relative violations."""
    if axiom not in NORM_AXIOMS + METRIC_AXIOMS:
        raise ValueError(f"unknown axiom {axiom!r}")
    rng = np.random.default_rng(seed)
    f = _caller(target)
    x = sampler(rng, n_samples)
    y = sampler(rng, n_samples)

    if axiom == "nonneg":
        v = f(x)
        return _report(axiom, -v, 0.0, tol)
    if axiom == "N1":
        v = f(x)
        floor = tol * np.linalg.norm(x.reshape(n_samples, -1), axis=-1)
        zero = f(np.zeros_like(x[:1]))
        excess = np.concatenate([floor - v, np.abs(zero)])
        return _count(axiom, excess, tol)
    if axiom == "N2":
        fx = f(x)
        excess, rhs = [], []
        for a in HOMOGENEITY_SCALES:
            excess.append(np.abs(f(a * x) - a * fx))
            rhs.append(a * fx)
        return _report(axiom, np.concatenate(excess), np.concatenate(rhs), tol)
    if axiom == "N3":
        rhs = f(x) + f(y)
        return _report(axiom, f(x + y) - rhs, rhs, tol)
    if axiom == "N4":
        fx = f(x)
        return _report(axiom, np.abs(fx - f(-x)), fx, tol)
    if axiom == "N5":
        lo = np.abs(x)
        hi = lo + np.abs(y)
        fh = f(hi)
        return _report(axiom, f(lo) - fh, fh, tol)
    if axiom == "C1":
        lam = rng.uniform(0.0, 1.0, size=(n_samples,) + (1,) * (x.ndim - 1))
        rhs = lam.reshape(-1) * f(x) + (1 - lam.reshape(-1)) * f(y)
        return _report(axiom, f(lam * x + (1 - lam) * y) - rhs, rhs, tol)

    # metric axioms: target(x, y) -> d(x, y)
    if axiom == "M1":
        return _report(axiom, -f(x, y), 0.0, tol)
    if axiom == "M2":
        return _report(axiom, np.abs(f(x, x)), 0.0, tol)
    if axiom == "M3":
        z = sampler(rng, n_samples)
        rhs = f(x, y) + f(y, z)
        return _report(axiom, f(x, z) - rhs, rhs, tol)
    dxy = f(x, y)
    return _report(axiom, np.abs(dxy - f(y, x)), dxy, tol)


def _count(axiom, excess, tol) -> AxiomReport:
    # definiteness: a sample violates when f(x) falls below tol * ||x||_2
    bad = excess > 0
    return AxiomReport(axiom, int(excess.size), int(bad.sum()), float(max(excess.max(initial=0.0), 0.0)), float(tol))


def check_all(target, axioms, sampler, n_samples=10_000, tol=1e-9, seed=0) -> list[AxiomReport]:
    return [check_axiom(target, a, sampler, n_samples, tol, seed) for a in axioms]


def write_reports(reports, path) -> None:
    """One JSON object per line."""
    with Path(path).open("w") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_reports(path) -> list[AxiomReport]:
    return [AxiomReport(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# exhaustive triangle count on finite matrices


def count_triangle_violations(M, tol: float = 0.0) -> int:
    """Ordered triples of distinct ``(i, j, k)`` with ``M[i,k] > M[i,j] + M[j,k] + tol``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    n = M.shape[0]
    off = ~np.eye(n, dtype=bool)
    total = 0
    for j in range(n):
        bad = M > M[:, j:j + 1] + M[j:j + 1, :] + tol
        bad &= off
        bad[j, :] = False
        bad[:, j] = False
        total += int(bad.sum())
    return total
