"""Norm heads that satisfy the triangle inequality by construction.

Every head maps a batch ``(B, n)`` of vectors to ``(B,)`` non-negative
values (a single vector maps to a scalar).  Deep Norms and Wide Norms are
positively homogeneous and subadditive for any parameter values that respect
their constraints; Neural Metric heads trade homogeneity for concave
per-channel activations and still induce quasi-metrics.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch
from torch import nn

from .diffcore import (constrain, l2norm, make_generator, maxmean, maxrelu,
                       min_affine, uniform_init)

HEADS: dict[str, type] = {}


def register(cls):
    HEADS[cls.__name__] = cls
    return cls


def _param(t: torch.Tensor, constraint: str = "none") -> nn.Parameter:
    return constrain(nn.Parameter(t), constraint)


class Head(nn.Module):
    """Base class: batching, descriptors and the homogeneity flag."""

    homogeneous = True

    def __init__(self, in_dim: int, **config):
        super().__init__()
        self.in_dim = int(in_dim)
        self._config = {"in_dim": self.in_dim, **config}

    def descriptor(self) -> dict:
        return {"kind": type(self).__name__, **self._config}

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{type(self).__name__} expects dimension {self.in_dim}, got {x.shape[-1]}")
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._check(x)
        if x.dim() == 1:
            return self.value(x.unsqueeze(0))[0]
        return self.value(x)

    def value(self, x: torch.Tensor) -> torch.Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# single-component norms


@register
class EuclideanNorm(Head):
    def __init__(self, in_dim: int, dtype=torch.float64, seed=None):
        super().__init__(in_dim)

    def value(self, x):
        return l2norm(x)


@register
class MahalanobisNorm(Head):
    """``||W x||_2`` for an ``m x n`` matrix ``W``; a semi-norm when ``W`` is singular."""

    def __init__(self, in_dim: int, out_dim: int | None = None, dtype=torch.float64, seed=None):
        out_dim = in_dim if out_dim is None else int(out_dim)
        super().__init__(in_dim, out_dim=out_dim)
        g = make_generator(seed)
        self.W = _param(uniform_init((out_dim, in_dim), in_dim, g, dtype=dtype))

    def value(self, x):
        return l2norm(x @ self.W.T)


def mahalanobis(W, x) -> torch.Tensor:
    W = torch.as_tensor(W, dtype=torch.float64)
    x = torch.as_tensor(x, dtype=torch.float64)
    if W.shape[-1] != x.shape[-1]:
        raise ValueError(f"W has {W.shape[-1]} columns but x has length {x.shape[-1]}")
    return l2norm(x @ W.T)


def asymmetrize_input(x: torch.Tensor) -> torch.Tensor:
    """``relu(x :: -x)``: lifts ``R^n`` to the positive orthant of ``R^2n``."""
    return torch.relu(torch.cat((x, -x), dim=-1))


# ---------------------------------------------------------------------------
# pooling


class Pool(nn.Module):
    def __init__(self, kind: str = "mean", dtype=torch.float64):
        super().__init__()
        if kind not in ("mean", "max", "maxmean"):
            raise ValueError(f"unknown pooling {kind!r}")
        self.kind = kind
        if kind == "maxmean":
            self.alpha = _param(torch.tensor(0.5, dtype=dtype), "unit")

    def forward(self, v):
        if self.kind == "mean":
            return v.mean(dim=-1)
        if self.kind == "max":
            return v.max(dim=-1).values
        return maxmean(v, self.alpha)


# ---------------------------------------------------------------------------
# Deep Norm


@register
class DeepNorm(Head):
    """``h_i = g_i(W_i+ h_{i-1} + U_i x)`` with ``h_0 = 0`` and no biases.

    ``widths`` lists the hidden layers; the scalar output is a mean or MaxMean
    over the last hidden layer, whose activation is kept non-negative.
    ``W_i+`` is clipped to be non-negative after each optimizer step.
    """

    def __init__(self, in_dim: int, widths=(64, 64), activation: str = "relu",
                 pool: str = "mean", dtype=torch.float64, seed=None):
        widths = [int(w) for w in widths]
        super().__init__(in_dim, widths=widths, activation=activation, pool=pool)
        if activation not in ("relu", "maxrelu"):
            raise ValueError(f"unknown activation {activation!r}")
        if activation == "maxrelu" and any(w % 2 for w in widths):
            raise ValueError("maxrelu layers need even widths")
        g = make_generator(seed)
        self.activation = activation
        self.U = nn.ParameterList()
        self.W = nn.ParameterList()
        self.ab = nn.ParameterList()
        prev = None
        for width in widths:
            self.U.append(_param(uniform_init((width, in_dim), in_dim, g, dtype=dtype)))
            if prev is not None:
                self.W.append(_param(uniform_init((width, prev), prev, g, nonneg=True, dtype=dtype), "nonneg"))
            if activation == "maxrelu":
                self.ab.append(_param(torch.full((2,), 0.5, dtype=dtype), "nonneg"))
            prev = width
        self.pool = Pool(pool, dtype=dtype)

    def channels(self, x: torch.Tensor) -> torch.Tensor:
        """Last hidden layer; every entry is a non-negative asymmetric semi-norm of ``x``."""
        h = None
        last = len(self.U) - 1
        for i, U in enumerate(self.U):
            z = x @ U.T
            if h is not None:
                z = z + h @ self.W[i - 1].T
            if self.activation == "relu":
                h = torch.relu(z)
            else:
                h = maxrelu(z, self.ab[i][0], self.ab[i][1], nonneg=(i == last))
        return h

    def value(self, x):
        return self.pool(self.channels(x))


def deep_norm_forward(model: DeepNorm, x) -> torch.Tensor:
    return model(torch.as_tensor(x, dtype=next(model.parameters()).dtype))


# ---------------------------------------------------------------------------
# Wide Norm


@register
class WideNorm(Head):
    """MaxMean of ``k`` Mahalanobis norms ``||W_i x||_2`` with ``W_i`` of size ``m x n``.

    With ``asymmetric`` the input is lifted by :func:`asymmetrize_input` and the
    ``W_i`` are clipped non-negative, which keeps each component monotone on
    the positive orthant.
    """

    def __init__(self, in_dim: int, n_components: int = 32, component_dim: int | None = None,
                 asymmetric: bool = False, pool: str = "maxmean", dtype=torch.float64, seed=None):
        lifted = 2 * in_dim if asymmetric else in_dim
        component_dim = lifted if component_dim is None else int(component_dim)
        if component_dim > lifted:
            raise ValueError(f"component_dim {component_dim} exceeds input dimension {lifted}")
        super().__init__(in_dim, n_components=int(n_components), component_dim=component_dim,
                         asymmetric=bool(asymmetric), pool=pool)
        g = make_generator(seed)
        self.asymmetric = bool(asymmetric)
        self.k, self.m = int(n_components), component_dim
        self.W = _param(uniform_init((self.k, self.m, lifted), lifted, g, nonneg=self.asymmetric, dtype=dtype),
                        "nonneg" if self.asymmetric else "none")
        self.pool = Pool(pool, dtype=dtype)

    def lift(self, x):
        return asymmetrize_input(x) if self.asymmetric else x

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Component projections ``W_i x`` of shape ``(B, k, m)``."""
        z = self.lift(x) @ self.W.reshape(self.k * self.m, -1).T
        return z.reshape(*x.shape[:-1], self.k, self.m)

    def channels(self, x):
        return l2norm(self.project(x))

    def value(self, x):
        return self.pool(self.channels(x))


def wide_norm_forward(model: WideNorm, x) -> torch.Tensor:
    return model(torch.as_tensor(x, dtype=model.W.dtype))


# ---------------------------------------------------------------------------
# Neural Metrics


class ConcaveActivation(nn.Module):
    """Per-channel ``f(v) = min_j (w_j v + b_j)`` with ``w, b >= 0`` and ``b_0 = 0``."""

    def __init__(self, channels: int, pieces: int = 5, dtype=torch.float64, seed=None):
        super().__init__()
        g = make_generator(seed)
        self.w = _param(torch.ones(channels, pieces, dtype=dtype), "nonneg")
        self.b_rest = _param(torch.rand(channels, pieces - 1, generator=g, dtype=dtype), "nonneg")

    @property
    def b(self) -> torch.Tensor:
        zero = torch.zeros(self.b_rest.shape[0], 1, dtype=self.b_rest.dtype)
        return torch.cat((zero, self.b_rest), dim=1)

    def forward(self, v):
        return min_affine(v, self.w, self.b)


def concave_apply(w, b, v) -> torch.Tensor:
    """Evaluate concave pieces given explicit parameters; validates constraints."""
    w = torch.as_tensor(w, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    v = torch.as_tensor(v, dtype=torch.float64)
    if w.dim() == 1:
        w, b = w.unsqueeze(0), b.unsqueeze(0)
    if (w < 0).any() or (b < 0).any() or (b[:, 0] != 0).any():
        raise ValueError("concave pieces need w >= 0, b >= 0 and b_0 = 0")
    if (v < 0).any():
        raise ValueError("concave activation is defined on non-negative inputs")
    if v.dim() == 0 or v.shape[-1] != w.shape[0]:
        return min_affine(v.unsqueeze(-1), w, b).squeeze(-1)
    return min_affine(v, w, b)


@register
class NeuralMetricHead(Head):
    """Concave activation on each base channel, then mean / max / MaxMean pooling."""

    homogeneous = False

    def __init__(self, in_dim: int, base: dict, pieces: int = 5, pool: str = "maxmean",
                 dtype=torch.float64, seed=None):
        super().__init__(in_dim, base=base, pieces=pieces, pool=pool)
        self.base = build_head({**base, "in_dim": in_dim}, dtype=dtype, seed=seed)
        if not hasattr(self.base, "channels"):
            raise ValueError(f"{base['kind']} has no channels to activate")
        n_channels = self.base.channels(torch.zeros(1, in_dim, dtype=dtype)).shape[-1]
        self.concave = ConcaveActivation(n_channels, pieces, dtype=dtype,
                                         seed=None if seed is None else seed + 1)
        self.pool = Pool(pool, dtype=dtype)

    def value(self, x):
        return self.pool(self.concave(self.base.channels(x)))


def neural_metric_forward(head: NeuralMetricHead, z) -> torch.Tensor:
    return head(torch.as_tensor(z, dtype=head.concave.w.dtype))


# ---------------------------------------------------------------------------
# wrappers


@register
class Symmetrized(Head):
    """``f(x) + f(-x)``: symmetric whenever ``f`` is an asymmetric semi-norm."""

    def __init__(self, in_dim: int, base: dict, dtype=torch.float64, seed=None):
        super().__init__(in_dim, base=base)
        self.base = build_head({**base, "in_dim": in_dim}, dtype=dtype, seed=seed)
        self.homogeneous = self.base.homogeneous

    def value(self, x):
        return self.base.value(x) + self.base.value(-x)


@register
class Definite(Head):
    """``f(x) + lam * ||x||_2``: positive definite for any ``lam > 0``."""

    def __init__(self, in_dim: int, base: dict, lam: float = 1e-2, dtype=torch.float64, seed=None):
        if lam <= 0:
            raise ValueError(f"lam must be positive, got {lam}")
        super().__init__(in_dim, base=base, lam=float(lam))
        self.base = build_head({**base, "in_dim": in_dim}, dtype=dtype, seed=seed)
        self.lam = float(lam)
        self.homogeneous = self.base.homogeneous

    def value(self, x):
        return self.base.value(x) + self.lam * l2norm(x)


def symmetrize(head: Head) -> Symmetrized:
    """Wrap an existing head (parameters shared, not copied)."""
    wrapped = Symmetrized.__new__(Symmetrized)
    Head.__init__(wrapped, head.in_dim, base=head.descriptor())
    wrapped.base = head
    wrapped.homogeneous = head.homogeneous
    return wrapped


def make_definite(head: Head, lam: float) -> Definite:
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    wrapped = Definite.__new__(Definite)
    Head.__init__(wrapped, head.in_dim, base=head.descriptor(), lam=float(lam))
    wrapped.base = head
    wrapped.lam = float(lam)
    wrapped.homogeneous = head.homogeneous
    return wrapped


# ---------------------------------------------------------------------------
# baselines without guarantees


@register
class MLPHead(Head):
    """Unconstrained ReLU network with a linear scalar output."""

    homogeneous = False

    def __init__(self, in_dim: int, hidden: int = 64, depth: int = 3, dtype=torch.float64, seed=None):
        super().__init__(in_dim, hidden=int(hidden), depth=int(depth))
        g = make_generator(seed)
        layers = []
        prev = in_dim
        for _ in range(depth):
            layers.append(_linear(prev, hidden, g, dtype))
            prev = hidden
        self.hidden = nn.ModuleList(layers)
        self.out = _linear(prev, 1, g, dtype)

    def value(self, x):
        for layer in self.hidden:
            x = torch.relu(layer(x))
        return self.out(x).squeeze(-1)


@register
class ICNNHead(Head):
    """Input convex network with biases: convex in ``x`` but not a norm."""

    homogeneous = False

    def __init__(self, in_dim: int, hidden: int = 64, depth: int = 3, dtype=torch.float64, seed=None):
        super().__init__(in_dim, hidden=int(hidden), depth=int(depth))
        g = make_generator(seed)
        self.U = nn.ModuleList([_linear(in_dim, hidden, g, dtype) for _ in range(depth)])
        self.W = nn.ParameterList([
            _param(uniform_init((hidden, hidden), hidden, g, nonneg=True, dtype=dtype), "nonneg")
            for _ in range(depth - 1)])
        self.w_out = _param(uniform_init((hidden,), hidden, g, nonneg=True, dtype=dtype), "nonneg")
        self.u_out = _linear(in_dim, 1, g, dtype)

    def value(self, x):
        z = torch.relu(self.U[0](x))
        for U, W in zip(self.U[1:], self.W):
            z = torch.relu(U(x) + z @ W.T)
        return z @ self.w_out + self.u_out(x).squeeze(-1)


def _linear(n_in: int, n_out: int, g: torch.Generator, dtype) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=dtype)
    with torch.no_grad():
        layer.weight.copy_(uniform_init((n_out, n_in), n_in, g, dtype=dtype))
        layer.bias.copy_(uniform_init((n_out,), n_in, g, dtype=dtype))
    return layer


# ---------------------------------------------------------------------------
# construction and persistence


def build_head(descriptor: dict, dtype=torch.float64, seed=None) -> Head:
    desc = dict(descriptor)
    kind = desc.pop("kind")
    if kind not in HEADS:
        raise ValueError(f"unknown head kind {kind!r}")
    return HEADS[kind](dtype=dtype, seed=seed, **desc)


FORMAT = "triq-model/1"


def save_head(head: Head, path) -> None:
    """Write ``{"format", "arch", "params": [[name, shape, values], ...]}`` as JSON.

    Parameters appear in ``state_dict`` order; values are float64 written with
    ``repr`` precision so a reload is bit-exact.
    """
    params = [[name, list(t.shape), [float(v) for v in t.detach().double().reshape(-1).tolist()]]
              for name, t in head.state_dict().items()]
    Path(path).write_text(json.dumps({"format": FORMAT, "arch": head.descriptor(), "params": params}))


def load_head(path, dtype=torch.float64) -> Head:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != FORMAT:
        raise ValueError(f"unsupported model format {blob.get('format')!r}")
    head = build_head(blob["arch"], dtype=dtype)
    state = {name: torch.tensor(values, dtype=dtype).reshape(shape) for name, shape, values in blob["params"]}
    head.load_state_dict(state)
    return head
