"""Map interpretation: learned reward map, cell classification, path planning.

The reward map is a two-layer convolution over the map raster whose three
channels are trained (through the reward prediction loss) to mean wall,
navigable and target. Classified cell values feed a multiplicative
value-iteration planner, evaluated in log space because the raw recursion
v_k = v_{k-1} * max(neighbors) underflows catastrophically with distance
while log space preserves the orderings the plan needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import InvalidBatch

CLASS_WALL, CLASS_NAV, CLASS_TARGET = 0, 1, 2
CLASS_VALUES = np.array([0.0, 0.99, 1.0])
DIRECTIONS = ("N", "E", "S", "W")
DIR_VECTORS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])
PLAN_TEMPERATURE = -np.log(0.99)
TARGET_VALUE_THRESHOLD = 0.995
WALL_VALUE_THRESHOLD = 0.5


@dataclass
class PlanGrid:
    sttd: np.ndarray      # (N, 4) distribution over N/E/S/W per fine cell
    dist: np.ndarray      # (N,) distance measure in [0, 1], 0 at targets
    log_v: np.ndarray     # (N,) final log values (-inf for walls)
    has_target: bool = True


def init_params(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "map/conv1_w": rng.normal(0.0, np.sqrt(2.0 / 9), size=(8, 1, 3, 3)),
        "map/conv1_b": np.zeros(8),
        "map/conv2_w": rng.normal(0.0, np.sqrt(2.0 / 72), size=(3, 8, 3, 3)),
        "map/conv2_b": np.zeros(3),
    }


def reward_map(raster, params) -> nx.Tensor:
    """(3, H, W) non-negative channel activations over the map raster."""
    raster_t = nx.as_tensor(raster)
    x = nx.reshape(raster_t, (1,) + raster_t.data.shape)
    h = nx.conv2d(x, params["map/conv1_w"], params["map/conv1_b"], padding=1)
    return nx.relu(nx.conv2d(h, params["map/conv2_w"], params["map/conv2_b"], padding=1))


def classify(rm: np.ndarray, width: int, temperature: float = 0.01) -> np.ndarray:
    """Per-fine-cell values in {~1.0 target, ~0.99 navigable, ~0 wall}.

    Channels are averaged over each 3x3 maze cell, softmaxed sharply, and the
    resulting class mixture maps to a value broadcast back to the cell's
    fine cells.
    """
    if rm.shape[1] % width or rm.shape[1] // width != 3:
        raise ValueError(f"reward map {rm.shape} does not tile {width}x{width} maze cells")
    means = rm.reshape(3, width, 3, width, 3).mean(axis=(2, 4))
    z = (means - means.max(axis=0)) / temperature
    e = np.exp(z)
    probs = e / e.sum(axis=0)
    values = np.tensordot(CLASS_VALUES, probs, axes=(0, 0))
    return np.kron(values, np.ones((3, 3)))


def ground_truth_values(maze) -> np.ndarray:
    """Oracle classification straight from the maze grid."""
    from .maze_world import TARGET, WALL
    coarse = np.where(maze.grid == WALL, 0.0, np.where(maze.grid == TARGET, 1.0, 0.99))
    return np.kron(coarse, np.ones((3, 3)))


def _neighbor_stack(grid: np.ndarray) -> np.ndarray:
    """(4, H, W) neighbor values in N/E/S/W order, -inf outside the map."""
    padded = np.pad(grid, 1, constant_values=-np.inf)
    return np.stack([padded[:-2, 1:-1], padded[1:-1, 2:], padded[2:, 1:-1], padded[1:-1, :-2]])


def plan(values: np.ndarray, iterations: int = 200) -> PlanGrid:
    """Multiplicative shortest-path recursion, run in log space.

    log v_k = log v_{k-1} + max over 4-neighbors of log v_{k-1}; walls are
    pinned to -inf. The per-cell direction distribution is a sharp softmax
    over the four neighbor log values; the distance measure is 1 - v_K.
    """
    n = values.size
    if not (values >= TARGET_VALUE_THRESHOLD).any():
        return PlanGrid(sttd=np.full((n, 4), 0.25), dist=np.ones(n),
                        log_v=np.full(n, -np.inf), has_target=False)
    with np.errstate(divide="ignore"):
        log_v = np.where(values < WALL_VALUE_THRESHOLD, -np.inf,
                         np.log(np.minimum(values, 1.0)))
    for _ in range(iterations):
        log_v = log_v + _neighbor_stack(log_v).max(axis=0)
    neigh = _neighbor_stack(log_v)
    peak = neigh.max(axis=0)
    dead = ~np.isfinite(peak)   # all four neighbors -inf: tie, keep uniform
    with np.errstate(invalid="ignore"):
        z = (neigh - peak) / PLAN_TEMPERATURE
    e = np.exp(np.where(dead[None, :, :], 0.0, z))
    sttd = (e / e.sum(axis=0)).reshape(4, n).T
    dist = np.clip(1.0 - np.exp(log_v), 0.0, 1.0)
    return PlanGrid(sttd=sttd, dist=dist.reshape(n), log_v=log_v.reshape(n))


def query_plan(grid: PlanGrid, belief: np.ndarray) -> tuple[np.ndarray, float]:
    """Belief-weighted direction distribution and target distance."""
    if belief.size != grid.sttd.shape[0]:
        raise ValueError(f"belief size {belief.size} vs plan {grid.sttd.shape[0]}")
    sttd = belief @ grid.sttd
    total = sttd.sum()
    if total > 0:
        sttd = sttd / total
    return sttd, float(belief @ grid.dist)


def reward_map_loss(frames, params) -> nx.Tensor:
    """Cross entropy of the reward class at the believed position.

    Frames carry (raster, belief, class index); the belief is a constant
    here (gradients stop at the localization boundary). The class posterior
    is the belief-weighted per-cell channel softmax.
    """
    if not frames:
        raise InvalidBatch("reward-map loss needs at least one frame")
    cache: dict[int, nx.Tensor] = {}
    total = None
    for raster, belief, cls in frames:
        key = id(raster)
        sm = cache.get(key)
        if sm is None:
            rm = reward_map(raster, params)
            sm = nx.softmax(nx.reshape(rm, (3, -1)), axis=0)
            cache[key] = sm
        q = nx.matmul(sm, nx.Tensor(belief))
        term = nx.mul(nx.log(nx.clamp_min(nx.pick(q, int(cls)), 1e-12)), -1.0)
        total = term if total is None else nx.add(total, term)
    return total


def bfs_distance_grid(navigable: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Fine-grid BFS distance to the nearest target cell; -1 if unreachable."""
    from collections import deque

    h, w = navigable.shape
    dist = np.full((h, w), -1, dtype=int)
    queue = deque()
    for r, c in np.argwhere(targets):
        dist[r, c] = 0
        queue.append((int(r), int(c)))
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIR_VECTORS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and navigable[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist
