"""Reverse-mode differentiation primitives, constrained parameters and Adam.

Gradients are computed by ``torch.autograd``.  This module fixes the
conventions every architecture in the package relies on:

* ``relu`` has subgradient 0 at 0.
* element-wise and pairwise ``max`` send the whole gradient to the first
  argument on ties; ``min`` over affine pieces sends it to the lowest index.
* parameters carry a ``constraint`` attribute (``"none"``, ``"nonneg"`` or
  ``"unit"``) which :class:`Adam` re-establishes by clipping after every step.

A small :class:`Tape` records graphs over the supported op kinds so that the
same conventions can be exercised on arbitrary hand-built computations.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

CONSTRAINTS = ("none", "nonneg", "unit")
_EPS = float(np.finfo(np.float64).eps)


class TapeError(ValueError):
    """Raised when a tape node cannot be evaluated."""

    def __init__(self, node: int, message: str):
        super().__init__(f"node {node}: {message}")
        self.node = node


# ---------------------------------------------------------------------------
# functional ops with fixed tie conventions


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def tie_max(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Element-wise max whose gradient goes to ``a`` when ``a == b``."""
    return torch.where(a >= b, a, b)


def pair_max(x: torch.Tensor) -> torch.Tensor:
    """Max over channel pairs ``(2i, 2i+1)`` of the last axis."""
    if x.shape[-1] % 2:
        raise ValueError(f"pairwise max needs an even channel count, got {x.shape[-1]}")
    return tie_max(x[..., 0::2], x[..., 1::2])


def maxrelu(x: torch.Tensor, alpha, beta, nonneg: bool = False) -> torch.Tensor:
    """Pairwise MaxReLU over channels ``(2i, 2i+1)``.

    Each pair ``(a, b)`` becomes ``(max(a, b), alpha*relu(a) + beta*relu(b))``;
    outputs are laid out in the same interleaved order.  With ``nonneg`` the
    max output is passed through a relu so the whole layer is non-negative.
    """
    if x.shape[-1] % 2:
        raise ValueError(f"maxrelu needs an even channel count, got {x.shape[-1]}")
    a, b = x[..., 0::2], x[..., 1::2]
    hi = tie_max(a, b)
    if nonneg:
        hi = torch.relu(hi)
    lo = alpha * torch.relu(a) + beta * torch.relu(b)
    return torch.stack((hi, lo), dim=-1).reshape(x.shape)


def maxmean(v: torch.Tensor, alpha) -> torch.Tensor:
    """``alpha * max + (1 - alpha) * mean`` over the last axis."""
    return alpha * v.max(dim=-1).values + (1 - alpha) * v.mean(dim=-1)


def min_affine(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-channel ``min_j (w[c, j] * x[..., c] + b[c, j])``.

    ``x`` has shape ``(..., C)``; ``w`` and ``b`` have shape ``(C, K)``.
    Ties resolve to the lowest piece index.
    """
    pieces = x.unsqueeze(-1) * w + b
    idx = torch.argmin(pieces, dim=-1, keepdim=True)
    return torch.gather(pieces, -1, idx).squeeze(-1)


def l2norm(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x, dim=-1)


def conv3x3(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1, zero-padded 3x3 convolution on ``(batch, channels, H, W)``."""
    return torch.nn.functional.conv2d(x, weight, bias, stride=1, padding=1)


def clip_nonnegative(t: torch.Tensor) -> torch.Tensor:
    return torch.clamp(t, min=0.0)


# ---------------------------------------------------------------------------
# parameters


def constrain(p: nn.Parameter, kind: str) -> nn.Parameter:
    """Tag ``p`` with a projection constraint and apply it immediately."""
    if kind not in CONSTRAINTS:
        raise ValueError(f"unknown constraint {kind!r}")
    p.constraint = kind
    project_(p)
    return p


def project_(p: torch.Tensor) -> None:
    kind = getattr(p, "constraint", "none")
    with torch.no_grad():
        if kind == "nonneg":
            p.clamp_(min=0.0)
        elif kind == "unit":
            p.clamp_(0.0, 1.0)


def project_module_(module: nn.Module) -> None:
    for p in module.parameters():
        project_(p)


def uniform_init(shape, fan_in: int, generator: torch.Generator | None = None,
                 nonneg: bool = False, dtype=torch.float64) -> torch.Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); absolute values when ``nonneg``."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    t = (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound
    return t.abs() if nonneg else t


def make_generator(seed: int | None) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def snapshot(module: nn.Module) -> nn.Module:
    """Frozen deep copy: no gradients, safe to evaluate from many readers."""
    frozen = copy.deepcopy(module)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen.eval()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction followed by per-parameter constraint projection."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.state.m = [torch.zeros_like(p) for p in self.params]
        self.state.v = [torch.zeros_like(p) for p in self.params]

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads: list[torch.Tensor] | None = None) -> None:
        st = self.state
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        st.step += 1
        c1 = 1 - st.beta1 ** st.step
        c2 = 1 - st.beta2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(st.beta1).add_(g, alpha=1 - st.beta1)
            v.mul_(st.beta2).addcmul_(g, g, value=1 - st.beta2)
            p.sub_(st.lr * (m / c1) / ((v / c2).sqrt() + st.eps))
            project_(p)


def adam_step(state: Adam, grads: list[torch.Tensor] | None = None) -> list[torch.Tensor]:
    state.step(grads)
    return state.params


# ---------------------------------------------------------------------------
# tape


_UNARY = {
    "relu": relu,
    "mean": lambda x: x.mean(),
    "sum": lambda x: x.sum(),
    "l2norm": l2norm,
    "pairmax": pair_max,
}
_BINARY = {
    "matmul": torch.matmul,
    "add": torch.add,
    "sub": torch.sub,
    "max": tie_max,
    "sqerr": lambda a, b: ((a - b) ** 2).mean(),
}


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict


class Tape:
    """Ordered record of ops over named inputs and parameters.

    Build with :meth:`input`, :meth:`param` and :meth:`op`; every call returns
    the integer id of the produced node.  The last node is the output.
    """

    KINDS = tuple(_UNARY) + tuple(_BINARY) + ("scale", "concat", "minaffine", "conv3x3", "maxrelu")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, nn.Parameter] = {}

    def _push(self, kind, inputs=(), **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise TapeError(len(self.nodes), f"input {i} not produced yet")
        self.nodes.append(_Node(kind, tuple(inputs), attrs))
        return len(self.nodes) - 1

    def input(self, name: str) -> int:
        return self._push("input", name=name)

    def param(self, name: str, value, constraint: str = "none") -> int:
        p = nn.Parameter(torch.as_tensor(value, dtype=torch.float64).clone())
        constrain(p, constraint)
        self.params[name] = p
        return self._push("param", name=name)

    def op(self, kind: str, *inputs: int, **attrs) -> int:
        if kind not in self.KINDS:
            raise TapeError(len(self.nodes), f"unsupported op kind {kind!r}")
        return self._push(kind, inputs, **attrs)

    def run(self, inputs: Mapping[str, torch.Tensor], values: Mapping[str, torch.Tensor] | None = None):
        values = dict(self.params if values is None else values)
        out: list[torch.Tensor] = []
        for nid, node in enumerate(self.nodes):
            args = [out[i] for i in node.inputs]
            try:
                if node.kind == "input":
                    if node.attrs["name"] not in inputs:
                        raise TapeError(nid, f"missing input {node.attrs['name']!r}")
                    r = torch.as_tensor(inputs[node.attrs["name"]], dtype=torch.float64)
                elif node.kind == "param":
                    r = values[node.attrs["name"]]
                elif node.kind in _UNARY:
                    r = _UNARY[node.kind](*args)
                elif node.kind in _BINARY:
                    r = _BINARY[node.kind](*args)
                elif node.kind == "scale":
                    r = args[0] * float(node.attrs["c"])
                elif node.kind == "concat":
                    r = torch.cat(args, dim=-1)
                elif node.kind == "minaffine":
                    r = min_affine(*args)
                elif node.kind == "conv3x3":
                    r = conv3x3(*args)
                elif node.kind == "maxrelu":
                    r = maxrelu(args[0], args[1], args[2])
                else:  # pragma: no cover - guarded in op()
                    raise TapeError(nid, f"unsupported op kind {node.kind!r}")
            except TapeError:
                raise
            except (RuntimeError, ValueError, IndexError) as exc:
                shapes = [tuple(a.shape) for a in args]
                raise TapeError(nid, f"{node.kind} failed on shapes {shapes}: {exc}") from None
            if not torch.isfinite(r).all():
                raise TapeError(nid, f"non-finite value produced by {node.kind}")
            out.append(r)
        if not out:
            raise TapeError(0, "empty tape")
        return out[-1]


def evaluate(tape: Tape, inputs: Mapping[str, torch.Tensor]) -> torch.Tensor:
    with torch.no_grad():
        return tape.run(inputs)


def gradient(tape: Tape, inputs: Mapping[str, torch.Tensor], wrt_inputs: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of the scalar output with respect to every parameter.

    With ``wrt_inputs`` the named inputs are differentiated as well.
    """
    leaves = {k: torch.as_tensor(v, dtype=torch.float64).clone().requires_grad_(wrt_inputs)
              for k, v in inputs.items()}
    out = tape.run(leaves)
    if out.numel() != 1:
        raise TapeError(len(tape.nodes) - 1, f"gradient needs a scalar output, got shape {tuple(out.shape)}")
    targets = dict(tape.params)
    if wrt_inputs:
        targets.update(leaves)
    names = list(targets)
    grads = torch.autograd.grad(out.reshape(()), [targets[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(targets[n]) if g is None else g) for n, g in zip(names, grads)}


def finite_diff_check(fn, params, step: float = 1e-5, inputs: Mapping | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` is a :class:`Tape` (evaluated on ``inputs``) or a zero-argument
    callable returning a scalar tensor.  ``params`` maps names to leaf tensors
    (for a tape, ``None`` means all of its parameters).  The error per entry is
    ``|analytic - numeric| / (|numeric| + 1e-8)``, where the part of the
    discrepancy explained by rounding of the two function values,
    ``4 * eps * max(|f+|, |f-|) / (2 * step)``, is not counted.  Without that
    allowance an exactly zero gradient would fail against one ulp of noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(fn, Tape):
        tape = fn
        if params is None:
            params = tape.params
        f = lambda: tape.run(inputs or {})  # noqa: E731
    else:
        f = fn
    params = dict(params)
    out = f()
    if out.numel() != 1:
        raise ValueError("finite_diff_check needs a scalar function")
    names = list(params)
    analytic = torch.autograd.grad(out.reshape(()), [params[n] for n in names], allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for name, g in zip(names, analytic):
            p = params[name]
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                floor = 4 * _EPS * max(abs(up), abs(down)) / (2 * step)
                err = max(abs(gflat[i].item() - numeric) - floor, 0.0) / (abs(numeric) + 1e-8)
                worst = max(worst, err)
    return worst


def near_kink(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], step: float = 1e-5,
              tol: float = 1e-6) -> bool:
    """True when ``fn`` has a slope discontinuity within ``2 * step`` along some parameter axis.

    Takes the four difference slopes of ``fn`` on ``[-2h, 2h]``.  On a smooth
    function they lie on a line up to ``O(h^3)``, so their third difference
    vanishes whatever the curvature; a kink anywhere in the window leaves at
    least its jump in slope there.  Flags when that exceeds ``tol`` relative
    to the slopes, plus what rounding of the function values can explain.
    """
    with torch.no_grad():
        for p in params.values():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                f = []
                for k in (-2, -1, 0, 1, 2):
                    flat[i] = orig + k * step
                    f.append(fn().item())
                flat[i] = orig
                s = np.diff(f) / step
                third = abs(s[3] - 3 * s[2] + 3 * s[1] - s[0])
                noise = 16 * _EPS * max(abs(v) for v in f) / step
                if third > tol * (1.0 + np.abs(s).max()) + noise:
                    return True
    return False


def to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def batched(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, size: int = 4096) -> torch.Tensor:
    """Apply ``fn`` over row chunks of ``x`` without building a graph."""
    with torch.no_grad():
        return torch.cat([fn(x[i:i + size]) for i in range(0, x.shape[0], size)])
