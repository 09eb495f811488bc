"""Grid-maze world: generation, dynamics, first-person rendering, oracles.

Conventions used everywhere downstream:
  * grid[row, col], row 0 at the top; map north is -row, east is +col.
  * heading in degrees, 0 = north, 90 = east, normalized to [0, 360).
  * each maze cell is a 3x3 block of fine cells; continuous positions are in
    fine-cell units, so fine cell = floor(position).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EpisodeFinished, InvalidSize

WALL, OPEN, TARGET, SPAWN = 0, 1, 2, 3
_CELL_CHARS = {WALL: "#", OPEN: ".", TARGET: "X", SPAWN: "S"}
_CHAR_CELLS = {v: k for k, v in _CELL_CHARS.items()}

FINE = 3                      # fine cells per maze cell
LOCAL_WINDOW = 15             # default local-map extent (fine cells)
ANGLE_BINS = 30               # 3-hot compass resolution (12 degrees per bin)
FOV_DEG = 90.0

V_MAX = 0.25                  # fine cells per physics tick
VEL_DECAY = 0.7
VEL_GAIN = 0.3
ROT_PER_TICK = 6.0            # degrees
TICKS_PER_STEP = 4            # action repeat
AGENT_RADIUS = 0.3            # fine cells

TARGET_REWARD = 10.0
WALL_PENALTY = -0.1


class Action(enum.IntEnum):
    MOVE_FWD = 0
    MOVE_BACK = 1
    STRAFE_L = 2
    STRAFE_R = 3
    ROT_L = 4
    ROT_R = 5


ROTATIONS = (Action.ROT_L, Action.ROT_R)
_MOVE_OFFSET = {Action.MOVE_FWD: 0.0, Action.MOVE_BACK: 180.0,
                Action.STRAFE_L: -90.0, Action.STRAFE_R: 90.0}


@dataclass(eq=False)
class MazeSpec:
    """A maze grid with exactly one target and one spawn cell."""

    width: int
    grid: np.ndarray
    seed: int
    _vis_cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def raster(self) -> np.ndarray:
        return rasterize_map(self)

    @cached_property
    def fine_walls(self) -> np.ndarray:
        return np.kron(self.grid == WALL, np.ones((FINE, FINE), dtype=bool))

    @cached_property
    def fine_targets(self) -> np.ndarray:
        return np.kron(self.grid == TARGET, np.ones((FINE, FINE), dtype=bool))

    @cached_property
    def navigable(self) -> np.ndarray:
        return self.grid != WALL

    def cell_of(self, kind: int) -> tuple[int, int]:
        rows, cols = np.nonzero(self.grid == kind)
        return int(rows[0]), int(cols[0])


@dataclass
class Pose:
    row: float
    col: float
    heading: float
    vel: np.ndarray

    def copy(self) -> "Pose":
        return Pose(self.row, self.col, self.heading % 360.0, self.vel.copy())


@dataclass
class Observation:
    image: np.ndarray           # (H, W, 3) in [0, 1]
    angle_bits: np.ndarray      # (ANGLE_BINS,) 3-hot


def heading_vector(heading_deg: float) -> np.ndarray:
    h = math.radians(heading_deg)
    return np.array([-math.cos(h), math.sin(h)])


def direction_angle(drow: float, dcol: float) -> float:
    return math.degrees(math.atan2(dcol, -drow)) % 360.0


def discretize_angle(heading: float) -> np.ndarray:
    """3-hot compass code: center bin round(heading/12) plus circular neighbors."""
    center = int(round((heading % 360.0) / (360.0 / ANGLE_BINS))) % ANGLE_BINS
    bits = np.zeros(ANGLE_BINS)
    bits[[(center - 1) % ANGLE_BINS, center, (center + 1) % ANGLE_BINS]] = 1.0
    return bits


def quantized_heading(heading: float) -> float:
    """The heading the 3-hot code stands for (center-bin angle)."""
    center = int(round((heading % 360.0) / (360.0 / ANGLE_BINS))) % ANGLE_BINS
    return center * (360.0 / ANGLE_BINS)


# ---------------------------------------------------------------------------
# Generation, validation, serialization
# ---------------------------------------------------------------------------

def _maze_rng(width: int, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, width]))


def generate_maze(width: int, seed: int) -> MazeSpec:
    """Perfect maze via seeded randomized depth-first search.

    Rooms live at odd grid indices; carving a connecting wall cell between two
    rooms makes the navigable cell-adjacency graph a tree by construction.
    Spawn and target are drawn uniformly among navigable cells subject to a
    Manhattan separation of at least width/2.
    """
    if width % 2 == 0 or not 5 <= width <= 63:
        raise InvalidSize(f"width must be odd and in [5, 63], got {width}")
    rng = _maze_rng(width, seed)
    grid = np.full((width, width), WALL, dtype=np.uint8)
    rooms = [(r, c) for r in range(1, width, 2) for c in range(1, width, 2)]
    start = rooms[int(rng.integers(len(rooms)))]
    grid[start] = OPEN
    stack = [start]
    visited = {start}
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in ((-2, 0), (2, 0), (0, -2), (0, 2)):
            nr, nc = r + dr, c + dc
            if 1 <= nr < width - 1 and 1 <= nc < width - 1 and (nr, nc) not in visited:
                options.append((nr, nc))
        if not options:
            stack.pop()
            continue
        nr, nc = options[int(rng.integers(len(options)))]
        grid[(r + nr) // 2, (c + nc) // 2] = OPEN
        grid[nr, nc] = OPEN
        visited.add((nr, nc))
        stack.append((nr, nc))

    cells = np.argwhere(grid != WALL)
    min_sep = width / 2.0
    for _ in range(10_000):
        i, j = rng.integers(len(cells)), rng.integers(len(cells))
        if i == j:
            continue
        (tr, tc), (sr, sc) = cells[i], cells[j]
        if abs(int(tr) - int(sr)) + abs(int(tc) - int(sc)) >= min_sep:
            break
    else:  # corners of the room lattice always satisfy the separation
        (tr, tc), (sr, sc) = (1, 1), (width - 2, width - 2)
    grid[tr, tc] = TARGET
    grid[sr, sc] = SPAWN
    return MazeSpec(width=width, grid=grid, seed=seed)


def validate_maze(maze: MazeSpec) -> None:
    """Raise ValueError unless all structural invariants hold."""
    w, grid = maze.width, maze.grid
    if w % 2 == 0 or w < 5 or grid.shape != (w, w):
        raise ValueError("bad width or grid shape")
    border = np.concatenate([grid[0], grid[-1], grid[:, 0], grid[:, -1]])
    if not np.all(border == WALL):
        raise ValueError("outermost ring must be wall")
    if np.count_nonzero(grid == TARGET) != 1 or np.count_nonzero(grid == SPAWN) != 1:
        raise ValueError("need exactly one target and one spawn")
    cells = [tuple(x) for x in np.argwhere(grid != WALL)]
    cellset = set(cells)
    edges = sum((r + dr, c + dc) in cellset
                for r, c in cells for dr, dc in ((1, 0), (0, 1)))
    if edges != len(cells) - 1:
        raise ValueError("navigable graph is not a tree")
    seen = {cells[0]}
    frontier = [cells[0]]
    while frontier:
        r, c = frontier.pop()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (r + dr, c + dc)
            if n in cellset and n not in seen:
                seen.add(n)
                frontier.append(n)
    if len(seen) != len(cells):
        raise ValueError("navigable graph is disconnected")


def rasterize_map(maze: MazeSpec) -> np.ndarray:
    """Fine-grained map image: -0.5 at wall fine cells, +0.5 elsewhere."""
    coarse = np.where(maze.grid == WALL, -0.5, 0.5)
    return np.kron(coarse, np.ones((FINE, FINE)))


def save_maze(maze: MazeSpec, path) -> None:
    lines = [f"width {maze.width} seed {maze.seed}"]
    for row in maze.grid:
        lines.append("".join(_CELL_CHARS[int(v)] for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_maze(path) -> MazeSpec:
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split()
    if len(head) != 4 or head[0] != "width" or head[2] != "seed":
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    width, seed = int(head[1]), int(head[3])
    if len(lines) != width + 1:
        raise ValueError(f"{path}: expected {width} rows")
    grid = np.zeros((width, width), dtype=np.uint8)
    for r, line in enumerate(lines[1:]):
        if len(line) != width:
            raise ValueError(f"{path}: row {r} has length {len(line)}")
        for c, ch in enumerate(line):
            if ch not in _CHAR_CELLS:
                raise ValueError(f"{path}: bad cell char {ch!r}")
            grid[r, c] = _CHAR_CELLS[ch]
    if np.count_nonzero(grid == TARGET) != 1 or np.count_nonzero(grid == SPAWN) != 1:
        raise ValueError(f"{path}: need exactly one target and one spawn")
    return MazeSpec(width=width, grid=grid, seed=seed)


def maze_from_text(rows: list[str], seed: int = 0) -> MazeSpec:
    """Build a MazeSpec from character rows (test/demo helper)."""
    width = len(rows)
    grid = np.array([[_CHAR_CELLS[ch] for ch in row] for row in rows], dtype=np.uint8)
    return MazeSpec(width=width, grid=grid, seed=seed)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

@dataclass
class EnvState:
    maze: MazeSpec
    pose: Pose
    done: bool = False
    steps: int = 0


def reset(maze: MazeSpec, heading: float = 0.0) -> EnvState:
    sr, sc = maze.cell_of(SPAWN)
    pose = Pose(row=sr * FINE + 1.5, col=sc * FINE + 1.5,
                heading=heading % 360.0, vel=np.zeros(2))
    return EnvState(maze=maze, pose=pose)


def _disk_hits_wall(walls: np.ndarray, row: float, col: float,
                    radius: float = AGENT_RADIUS) -> bool:
    h, w = walls.shape
    r0 = max(int(math.floor(row - radius)), 0)
    r1 = min(int(math.floor(row + radius)), h - 1)
    c0 = max(int(math.floor(col - radius)), 0)
    c1 = min(int(math.floor(col + radius)), w - 1)
    for cr in range(r0, r1 + 1):
        for cc in range(c0, c1 + 1):
            if not walls[cr, cc]:
                continue
            dr = row - min(max(row, cr), cr + 1.0)
            dc = col - min(max(col, cc), cc + 1.0)
            if dr * dr + dc * dc < radius * radius:
                return True
    return False


def env_step(state: EnvState, action: Action) -> tuple[EnvState, float, bool]:
    """Advance one environment step (4 physics ticks).

    Per tick: rotations turn 6 degrees; moves blend velocity toward the
    commanded direction (v <- 0.7 v + 0.3 v_max dir, speed capped at v_max);
    position integrates per axis with wall sliding. Reaching a target fine
    cell ends the episode with +10; any wall contact otherwise costs -0.1.
    """
    if state.done:
        raise EpisodeFinished("episode already ended")
    action = Action(action)
    walls = state.maze.fine_walls
    targets = state.maze.fine_targets
    pose = state.pose.copy()
    contact = False
    done = False
    reward = 0.0
    for _ in range(TICKS_PER_STEP):
        if action in ROTATIONS:
            pose.heading = (pose.heading + (-ROT_PER_TICK if action == Action.ROT_L
                                            else ROT_PER_TICK)) % 360.0
            desired = np.zeros(2)
        else:
            desired = heading_vector(pose.heading + _MOVE_OFFSET[action])
        pose.vel = VEL_DECAY * pose.vel + VEL_GAIN * V_MAX * desired
        speed = float(np.hypot(*pose.vel))
        if speed > V_MAX:
            pose.vel *= V_MAX / speed
        nr = pose.row + pose.vel[0]
        if _disk_hits_wall(walls, nr, pose.col):
            contact = True
            pose.vel[0] = 0.0
            nr = pose.row
        pose.row = nr
        nc = pose.col + pose.vel[1]
        if _disk_hits_wall(walls, pose.row, nc):
            contact = True
            pose.vel[1] = 0.0
            nc = pose.col
        pose.col = nc
        if targets[int(pose.row), int(pose.col)]:
            done = True
            reward = TARGET_REWARD
            break
    if not done and contact:
        reward = WALL_PENALTY
    return replace(state, pose=pose, done=done, steps=state.steps + 1), reward, done


# ---------------------------------------------------------------------------
# First-person rendering
# ---------------------------------------------------------------------------

_CEILING = np.array([0.0, 0.0, 0.0])
_FLOOR = np.array([0.15, 0.15, 0.15])
_TARGET_FLOOR = np.array([0.1, 0.55, 0.1])


def _cast_rays(walls: np.ndarray, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Euclidean distance to the first wall cell along each unit ray (DDA)."""
    n = dirs.shape[1]
    h, w = walls.shape
    cell = np.tile(np.floor(origin).astype(int)[:, None], (1, n))
    step = np.where(dirs > 0, 1, -1)
    with np.errstate(divide="ignore"):
        t_delta = np.abs(1.0 / dirs)
    bound = cell + (step > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(dirs != 0, (bound - origin[:, None]) / dirs, np.inf)
    dist = np.zeros(n)
    active = np.ones(n, dtype=bool)
    for _ in range(2 * (h + w)):
        if not active.any():
            break
        axis = np.where(t_max[0] <= t_max[1], 0, 1)
        t_hit = np.take_along_axis(t_max, axis[None, :], axis=0)[0]
        idx = np.arange(n)
        cell[axis, idx] += step[axis, idx]
        t_max[axis, idx] += t_delta[axis, idx]
        rows = np.clip(cell[0], 0, h - 1)
        cols = np.clip(cell[1], 0, w - 1)
        hit = active & walls[rows, cols]
        dist[hit] = t_hit[hit]
        active &= ~hit
    return dist


def render(maze: MazeSpec, pose: Pose, size: int = 32) -> Observation:
    """Raycast 90-degree FOV view: shaded walls, dark floor, marked target."""
    walls, targets = maze.fine_walls, maze.fine_targets
    hgt = wid = size
    origin = np.array([pose.row, pose.col])
    fwd = heading_vector(pose.heading)
    right = np.array([fwd[1], -fwd[0]])
    plane = np.tan(math.radians(FOV_DEG / 2.0))
    px = (2.0 * (np.arange(wid) + 0.5) / wid - 1.0) * plane
    rays = fwd[:, None] + right[:, None] * px[None, :]
    norms = np.hypot(rays[0], rays[1])
    units = rays / norms
    dist = _cast_rays(walls, origin, units)
    dist = np.maximum(dist, 1e-6)
    d_perp = dist / norms

    img = np.zeros((hgt, wid, 3))
    ys = np.arange(hgt) + 0.5
    top = (hgt - hgt / d_perp) / 2.0
    bottom = (hgt + hgt / d_perp) / 2.0
    wall_mask = (ys[:, None] >= top[None, :]) & (ys[:, None] < bottom[None, :])
    shade = np.clip(1.0 / dist, 0.0, 1.0)
    img[wall_mask] = np.repeat(shade[None, :], hgt, axis=0)[wall_mask][:, None]

    floor_mask = ys[:, None] >= bottom[None, :]
    if floor_mask.any():
        t_perp = np.where(ys > hgt / 2.0, hgt / np.maximum(2.0 * ys - hgt, 1e-9), 0.0)
        t_ray = t_perp[:, None] * norms[None, :]
        pr = origin[0] + units[0][None, :] * t_ray
        pc = origin[1] + units[1][None, :] * t_ray
        h, w = walls.shape
        fr = np.clip(np.floor(pr).astype(int), 0, h - 1)
        fc = np.clip(np.floor(pc).astype(int), 0, w - 1)
        on_target = targets[fr, fc] & floor_mask
        img[floor_mask] = _FLOOR
        img[on_target] = _TARGET_FLOOR
    return Observation(image=img.astype(np.float32),
                       angle_bits=discretize_angle(pose.heading))


# ---------------------------------------------------------------------------
# Ground-truth local maps (training targets and oracle inputs)
# ---------------------------------------------------------------------------

def true_cell_index(pose: Pose, maze: MazeSpec) -> int:
    side = maze.width * FINE
    return int(pose.row) * side + int(pose.col)


def map_window(raster: np.ndarray, cell: tuple[int, int], window: int) -> np.ndarray:
    """window x window excerpt centered on `cell`, zero outside the map."""
    half = window // 2
    out = np.zeros((window, window))
    h, w = raster.shape
    r0, c0 = cell[0] - half, cell[1] - half
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + window, h), min(c0 + window, w)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = raster[rs:re, cs:ce]
    return out


def line_of_sight(walls: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> bool:
    """True if the segment between cell centers crosses no wall cell.

    Grid traversal from center to center; the source and destination cells
    themselves never block. Exact corner crossings step diagonally (a ray
    through a corner passes between the two side cells).
    """
    if src == dst:
        return True
    r0, c0 = src[0] + 0.5, src[1] + 0.5
    dr = dst[0] - src[0]
    dc = dst[1] - src[1]
    step_r = 1 if dr > 0 else -1
    step_c = 1 if dc > 0 else -1
    r, c = src
    next_r = src[0] + (1 if dr > 0 else 0)
    next_c = src[1] + (1 if dc > 0 else 0)
    while (r, c) != dst:
        t_r = (next_r - r0) / dr if dr != 0 else math.inf
        t_c = (next_c - c0) / dc if dc != 0 else math.inf
        if t_r < t_c:
            r += step_r
            next_r += step_r
        elif t_c < t_r:
            c += step_c
            next_c += step_c
        else:
            r += step_r
            c += step_c
            next_r += step_r
            next_c += step_c
        if (r, c) != dst and walls[r, c]:
            return False
    return True


def visibility_mask(maze: MazeSpec, cell: tuple[int, int],
                    window: int = LOCAL_WINDOW) -> np.ndarray:
    """Line-of-sight mask of the local window around `cell` (cached per maze)."""
    key = (cell, window)
    cached = maze._vis_cache.get(key)
    if cached is not None:
        return cached
    walls = maze.fine_walls
    h, w = walls.shape
    half = window // 2
    mask = np.zeros((window, window), dtype=bool)
    for i in range(window):
        for j in range(window):
            r, c = cell[0] + i - half, cell[1] + j - half
            if 0 <= r < h and 0 <= c < w:
                mask[i, j] = line_of_sight(walls, cell, (r, c))
    maze._vis_cache[key] = mask
    return mask


_FOV_ANGLE_CACHE: dict[int, np.ndarray] = {}


def _window_angles(window: int) -> np.ndarray:
    angles = _FOV_ANGLE_CACHE.get(window)
    if angles is None:
        half = window // 2
        rr, cc = np.mgrid[-half:half + 1, -half:half + 1]
        angles = np.degrees(np.arctan2(cc, -rr)) % 360.0
        _FOV_ANGLE_CACHE[window] = angles
    return angles


def fov_mask(heading: float, window: int = LOCAL_WINDOW) -> np.ndarray:
    """Cells whose center direction lies within the half-FOV of `heading`."""
    diff = np.abs(_window_angles(window) - heading % 360.0)
    diff = np.minimum(diff, 360.0 - diff)
    mask = diff <= FOV_DEG / 2.0 + 1e-9
    mask[window // 2, window // 2] = True
    return mask


def true_visible_local_map(maze: MazeSpec, pose: Pose,
                           window: int = LOCAL_WINDOW) -> np.ndarray:
    """Map excerpt limited to cells visible from the agent's fine cell.

    Visibility gates on the 3-hot quantized heading (90-degree FOV around the
    center-bin angle) and on line of sight between cell centers.
    """
    cell = (int(pose.row), int(pose.col))
    vals = map_window(maze.raster, cell, window)
    gate = visibility_mask(maze, cell, window) & fov_mask(quantized_heading(pose.heading), window)
    return vals * gate


def true_local_map(maze: MazeSpec, pose: Pose, window: int = LOCAL_WINDOW) -> np.ndarray:
    """Ungated map excerpt around the agent's fine cell."""
    return map_window(maze.raster, (int(pose.row), int(pose.col)), window)
