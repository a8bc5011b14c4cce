"""Goal-conditioned values on 11x11 gridworlds.

``V(s, g) = -f(phi(g) - phi(s))`` with a convolutional ``phi`` and a
norm-style head ``f``.  Training is TD with ``gamma = 1`` against
Polyak-averaged target networks; evaluation compares against exact values
and rolls out the greedy policy.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from torch import nn

from .diffcore import Adam, conv3x3, make_generator, uniform_init
from .norms import build_head

# '#' wall, '.' empty; rows top to bottom
LAYOUTS = {
    "four_room": [
        "###########",
        "#....#....#",
        "#....#....#",
        "#.........#",
        "#....#....#",
        "##.####.###",
        "#....#....#",
        "#.........#",
        "#....#....#",
        "#....#....#",
        "###########",
    ],
    "maze": [
        "###########",
        "#.........#",
        "#########.#",
        "#.#.......#",
        "#.#.#######",
        "#.#.#.#...#",
        "#.#.#.#.#.#",
        "#.#.#.....#",
        "#.#.#####.#",
        "#.........#",
        "###########",
    ],
}

# N, S, E, W: also the greedy tie-break order
DIRECTIONS = ((-1, 0), (1, 0), (0, 1), (0, -1))
NOISY = (1, 3)  # south and west moves carry reward noise in asymmetric envs


@dataclass
class GridEnv:
    kind: str
    asymmetric: bool
    walls: np.ndarray          # (H, W) bool
    cells: np.ndarray          # (n, 2) empty cells in reading order
    neighbors: np.ndarray      # (n, 4) next state per direction, -1 if blocked
    rewards: np.ndarray        # (n, 4) transition reward, nan if blocked
    noise: np.ndarray          # (n, 4) frozen reward perturbation

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def shape(self):
        return self.walls.shape

    def N(self, s: int) -> list[int]:
        return [int(t) for t in self.neighbors[s] if t >= 0]

    def reward(self, s: int, t: int) -> float:
        k = int(np.flatnonzero(self.neighbors[s] == t)[0])
        return float(self.rewards[s, k])

    def encode(self, states=None) -> torch.Tensor:
        """``(B, 3, H, W)`` one-hot planes: empty, wall, agent."""
        states = np.arange(self.n) if states is None else np.atleast_1d(states)
        H, W = self.shape
        obs = np.zeros((len(states), 3, H, W), dtype=np.float32)
        obs[:, 0] = ~self.walls
        obs[:, 1] = self.walls
        r, c = self.cells[states, 0], self.cells[states, 1]
        b = np.arange(len(states))
        obs[b, 0, r, c] = 0.0
        obs[b, 2, r, c] = 1.0
        return torch.from_numpy(obs)


def build_env(kind: str = "four_room", asymmetric: bool = False, seed: int = 0) -> GridEnv:
    if kind not in LAYOUTS:
        raise ValueError(f"unknown environment {kind!r}")
    walls = np.array([[ch == "#" for ch in row] for row in LAYOUTS[kind]])
    cells = np.argwhere(~walls)  # row-major = reading order
    index = {tuple(c): i for i, c in enumerate(cells)}
    n = len(cells)
    neighbors = np.full((n, 4), -1)
    for i, (r, c) in enumerate(cells):
        for k, (dr, dc) in enumerate(DIRECTIONS):
            neighbors[i, k] = index.get((r + dr, c + dc), -1)
    noise = np.zeros((n, 4))
    if asymmetric:
        rng = np.random.default_rng(seed)
        draw = rng.uniform(-5.0, 0.0, size=(n, 4))
        noise[:, NOISY] = draw[:, NOISY]
    rewards = np.where(neighbors >= 0, -1.0 + noise, np.nan)
    return GridEnv(kind, asymmetric, walls, cells, neighbors, rewards, noise)


def ground_truth_values(env: GridEnv) -> np.ndarray:
    """``V*[s, g]``: negated cheapest path cost, 0 on the diagonal."""
    s, k = np.nonzero(env.neighbors >= 0)
    G = coo_matrix((-env.rewards[s, k], (s, env.neighbors[s, k])), shape=(env.n, env.n)).tocsr()
    return -dijkstra(G, directed=True)


def all_pairs(env: GridEnv, V=None) -> np.ndarray:
    """Every ``(s, g)`` with ``s != g`` and ``g`` reachable from ``s``."""
    V = ground_truth_values(env) if V is None else V
    s, g = np.nonzero(~np.eye(env.n, dtype=bool) & np.isfinite(V))
    return np.stack([s, g], axis=1)


@dataclass
class TransitionSet:
    train: np.ndarray  # (m, 2) (s, g) pairs
    test: np.ndarray
    mode: str
    fraction: float
    held_out: np.ndarray

    def transitions(self, env: GridEnv):
        """``(s, s', g, r, done)`` for every training pair and available move."""
        out = []
        for s, g in self.train:
            for t in env.N(s):
                out.append((int(s), t, int(g), env.reward(s, t), int(t == g)))
        return out


def split_dataset(env: GridEnv, mode: str = "goal", fraction: float = 1.0) -> TransitionSet:
    """Hold out the last ``1 - fraction`` of cells in reading order as goals or states.

    With ``fraction == 1`` nothing is held out and the test set is every pair.
    """
    if mode not in ("goal", "state"):
        raise ValueError(f"unknown split mode {mode!r}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    pairs = all_pairs(env)
    k = int(round((1.0 - fraction) * env.n))
    held = np.arange(env.n - k, env.n)
    if k == 0:
        return TransitionSet(pairs, pairs.copy(), mode, fraction, held)
    col = 1 if mode == "goal" else 0
    out = np.isin(pairs[:, col], held)
    train, test = pairs[~out], pairs[out]
    if len(train) == 0:
        raise ValueError("training fraction leaves no training pairs")
    return TransitionSet(train, test, mode, fraction, held)


def head_descriptor(kind: str, asymmetric: bool, dim: int = 64) -> dict:
    if kind == "mlp":
        return {"kind": "MLPHead", "hidden": 64, "depth": 3}
    if kind == "icnn":
        return {"kind": "ICNNHead", "hidden": 64, "depth": 3}
    if kind == "euclidean":
        return {"kind": "EuclideanNorm"}
    if kind == "deepnorm":
        base = {"kind": "DeepNorm", "widths": [64] * 3, "activation": "maxrelu", "pool": "mean"}
    elif kind == "widenorm":
        base = {"kind": "WideNorm", "n_components": 32, "component_dim": dim, "asymmetric": asymmetric,
                "pool": "mean"}
    else:
        raise ValueError(f"unknown head {kind!r}")
    return {"kind": "NeuralMetricHead", "base": base, "pieces": 5, "pool": "mean"}


HEADS = ("mlp", "icnn", "deepnorm", "widenorm", "euclidean")


class ValueModel(nn.Module):
    """Conv 3x3 (32) -> conv 3x3 (64) -> FC 128 -> FC 64, then a head on ``phi(g) - phi(s)``."""

    def __init__(self, head: str = "widenorm", asymmetric: bool = False, grid=(11, 11),
                 filters=(32, 64), hidden: int = 128, dim: int = 64, dtype=torch.float32, seed: int = 0):
        super().__init__()
        g = make_generator(seed)
        c1, c2 = filters
        flat = c2 * grid[0] * grid[1]

        def p(shape, fan_in):
            return nn.Parameter(uniform_init(shape, fan_in, g, dtype=dtype))

        self.conv1_w, self.conv1_b = p((c1, 3, 3, 3), 27), p((c1,), 27)
        self.conv2_w, self.conv2_b = p((c2, c1, 3, 3), 9 * c1), p((c2,), 9 * c1)
        self.fc1_w, self.fc1_b = p((hidden, flat), flat), p((hidden,), flat)
        self.fc2_w, self.fc2_b = p((dim, hidden), hidden), p((dim,), hidden)
        self.head_kind = head
        self.head = build_head({**head_descriptor(head, asymmetric, dim), "in_dim": dim}, dtype=dtype, seed=seed + 1)

    def phi(self, obs: torch.Tensor) -> torch.Tensor:
        h = torch.relu(conv3x3(obs, self.conv1_w, self.conv1_b))
        h = torch.relu(conv3x3(h, self.conv2_w, self.conv2_b))
        h = torch.relu(h.flatten(1) @ self.fc1_w.T + self.fc1_b)
        return h @ self.fc2_w.T + self.fc2_b

    def value_from_features(self, fs, fg) -> torch.Tensor:
        return -self.head(fg - fs)

    def forward(self, s_obs, g_obs):
        return self.value_from_features(self.phi(s_obs), self.phi(g_obs))

    def table(self, obs: torch.Tensor) -> torch.Tensor:
        """``V[s, g]`` for every pair of encoded states."""
        f = self.phi(obs)
        n = f.shape[0]
        diff = (f.unsqueeze(0) - f.unsqueeze(1)).reshape(n * n, -1)  # row s, column g: f[g] - f[s]
        return -self.head(diff).reshape(n, n)


def polyak_(target: nn.Module, online: nn.Module, alpha: float = 0.95) -> None:
    """``target <- alpha * target + (1 - alpha) * online``."""
    with torch.no_grad():
        for pt, po in zip(target.parameters(), online.parameters()):
            pt.mul_(alpha).add_(po, alpha=1 - alpha)


def td_targets(env: GridEnv, Vbar: np.ndarray) -> np.ndarray:
    """``y[s, g] = max_{s'} r(s, s') + [s' != g] Vbar[s', g]``."""
    n = env.n
    y = np.full((n, n), -np.inf)
    for k in range(4):
        t = env.neighbors[:, k]
        ok = t >= 0
        done = t[ok][:, None] == np.arange(n)[None, :]
        cand = env.rewards[ok, k][:, None] + np.where(done, 0.0, Vbar[t[ok]])
        y[ok] = np.maximum(y[ok], cand)
    return y


@dataclass
class GVFRun:
    model: ValueModel
    loss: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (epoch, split, metrics)
    wall_time: float = 0.0


def td_train(env: GridEnv, model: ValueModel, data: TransitionSet, epochs: int = 1000, batch: int = 128,
             lr: float = 1e-4, alpha: float = 0.95, seed: int = 0, eval_every: int = 0,
             eval_episodes: int = 100) -> GVFRun:
    """TD regression onto targets from the target network, refreshed once per epoch."""
    if len(data.train) == 0:
        raise ValueError("empty training set")
    start = time.perf_counter()
    obs = env.encode()
    target = copy.deepcopy(model)
    for p in target.parameters():
        p.requires_grad_(False)
    opt = Adam(model.parameters(), lr=lr)
    g = make_generator(seed)
    pairs = torch.as_tensor(data.train)
    run = GVFRun(model)
    for epoch in range(1, epochs + 1):
        with torch.no_grad():
            Vbar = target.table(obs).double().numpy()
        y = torch.as_tensor(td_targets(env, Vbar), dtype=obs.dtype)
        perm = torch.randperm(len(pairs), generator=g)
        total = 0.0
        for b in range(0, len(perm), batch):
            s, gg = pairs[perm[b:b + batch]].T
            f = model.phi(obs)
            v = model.value_from_features(f[s], f[gg])
            loss = ((v - y[s, gg]) ** 2).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(s)
        run.loss.append(total / len(pairs))
        polyak_(target, model, alpha)
        if eval_every and (epoch % eval_every == 0 or epoch == epochs):
            for split in ("train", "test"):
                run.evals.append((epoch, split, evaluate(env, model, getattr(data, split),
                                                         n_episodes=eval_episodes, seed=seed)))
    run.wall_time = time.perf_counter() - start
    return run


def value_table(env: GridEnv, model: ValueModel) -> np.ndarray:
    with torch.no_grad():
        return model.table(env.encode()).double().numpy()


def rollout(env: GridEnv, V: np.ndarray, s: int, g: int, T: int = 121) -> tuple[bool, float, list]:
    """Greedy walk maximising ``r(s, s') + V(s', g)`` with ``V(g, g)`` taken as 0.

    Ties go to the first direction in N, S, E, W order.
    """
    path, cost = [s], 0.0
    for _ in range(T):
        if s == g:
            break
        best, best_k = -math.inf, -1
        for k in range(4):
            t = env.neighbors[s, k]
            if t < 0:
                continue
            q = env.rewards[s, k] + (0.0 if t == g else V[t, g])
            if q > best:
                best, best_k = q, k
        cost -= env.rewards[s, best_k]
        s = int(env.neighbors[s, best_k])
        path.append(s)
    return s == g, cost, path


def evaluate(env: GridEnv, model, pairs, T: int = 121, n_episodes: int = 100, seed: int = 0,
             V=None, Vstar=None) -> dict:
    """MSE against ``V*`` on all ``pairs``; success and SPL on up to ``n_episodes`` of them."""
    pairs = np.asarray(pairs)
    Vstar = ground_truth_values(env) if Vstar is None else Vstar
    V = value_table(env, model) if V is None else V
    mse = float(np.mean((V[pairs[:, 0], pairs[:, 1]] - Vstar[pairs[:, 0], pairs[:, 1]]) ** 2))
    rng = np.random.default_rng(seed)
    pick = pairs if len(pairs) <= n_episodes else pairs[rng.choice(len(pairs), n_episodes, replace=False)]
    succ, spl = [], []
    for s, g in pick:
        ok, p, _ = rollout(env, V, int(s), int(g), T)
        l = -Vstar[s, g]
        succ.append(float(ok))
        spl.append(float(ok) * l / max(p, l))
    return {"mse": mse, "success": float(np.mean(succ)), "spl": float(np.mean(spl))}


def direction_sensitive(pairs, Vstar, tol: float = 1e-9) -> np.ndarray:
    """Pairs whose optimal value changes when start and goal swap."""
    pairs = np.asarray(pairs)
    d = np.abs(Vstar[pairs[:, 0], pairs[:, 1]] - Vstar[pairs[:, 1], pairs[:, 0]])
    return pairs[d > tol]


def heatmaps(env: GridEnv, model, s0: int = 0, T: int = 121) -> dict:
    """Per-cell grids relative to ``s0``: value, squared error and SPL, each in both directions.

    ``*_from`` uses pairs ``(s0, s)``, ``*_to`` pairs ``(s, s0)``; walls are nan.
    """
    V, Vs = value_table(env, model), ground_truth_values(env)
    out = {}
    for name, (a, b) in {"from": (s0, None), "to": (None, s0)}.items():
        val = np.full(env.shape, np.nan)
        se = np.full(env.shape, np.nan)
        spl = np.full(env.shape, np.nan)
        for s in range(env.n):
            i, j = (a, s) if b is None else (s, b)
            r, c = env.cells[s]
            val[r, c] = V[i, j]
            se[r, c] = (V[i, j] - Vs[i, j]) ** 2
            if i == j:
                spl[r, c] = 1.0
            else:
                ok, p, _ = rollout(env, V, i, j, T)
                l = -Vs[i, j]
                spl[r, c] = float(ok) * l / max(p, l)
        out[f"value_{name}"], out[f"se_{name}"], out[f"spl_{name}"] = val, se, spl
    return out


def save_grid(grid: np.ndarray, path) -> None:
    np.savetxt(Path(path), grid, delimiter=",", fmt="%.10g")


@dataclass
class GVFConfig:
    env: str = "four_room"
    asymmetric: bool = False
    head: str = "widenorm"
    split: str = "goal"
    fraction: float = 1.0
    epochs: int = 1000
    batch: int = 128
    lr: float = 1e-4
    alpha: float = 0.95
    eval_every: int = 200
    episodes: int = 100
    filters: tuple = (32, 64)


def run_gvf(cfg: GVFConfig, seed: int = 0) -> tuple[GVFRun, dict]:
    env = build_env(cfg.env, cfg.asymmetric, seed)
    data = split_dataset(env, cfg.split, cfg.fraction)
    model = ValueModel(cfg.head, cfg.asymmetric, env.shape, tuple(cfg.filters), seed=seed + 1)
    run = td_train(env, model, data, cfg.epochs, cfg.batch, cfg.lr, cfg.alpha, seed=seed + 2,
                   eval_every=cfg.eval_every, eval_episodes=cfg.episodes)
    Vs = ground_truth_values(env)
    V = value_table(env, model)
    final = {split: evaluate(env, model, getattr(data, split), n_episodes=cfg.episodes, seed=seed, V=V, Vstar=Vs)
             for split in ("train", "test")}
    return run, final
