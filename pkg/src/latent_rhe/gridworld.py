"""Pixel-observed 7x7 navigation task with goal, hole, blocks and an optional spider.

Cells are ``(x, y)`` pairs: ``x`` is the column, ``y`` the row, with ``(0, 0)``
in the upper-left corner.  Observations are channel-major float32 images in
``[0, 1]``.
"""
from __future__ import annotations

import copy
import functools
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from latent_rhe.errors import LayoutError, UnreachableError, UsageError

Cell = tuple[int, int]

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
NUM_ACTIONS = 4
ACTION_NAMES = ("up", "down", "left", "right")
MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0]], dtype=np.int64)

TIME_LIMIT = 500
TILE = 24
GLOBAL_SIZE = 64
LOCAL_TILE = 9
LOCAL_SIZE = 28

FLOOR = (0.15, 0.15, 0.15)
BLOCK = (0.45, 0.30, 0.15)
AGENT = (0.85, 0.85, 0.85)
GOAL = (1.0, 0.85, 0.2)
HOLE = (0.0, 0.0, 0.0)
SPIDER = (0.8, 0.1, 0.1)
FRAME = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class TaskVariant:
    stochastic: bool = False
    local_view: bool = False

    @property
    def name(self) -> str:
        return f"{'stoch' if self.stochastic else 'det'}-{'local' if self.local_view else 'global'}"

    @classmethod
    def from_name(cls, name: str) -> TaskVariant:
        try:
            dyn, view = name.split("-")
        except ValueError:
            raise UsageError(f"unknown variant {name!r}") from None
        if dyn not in ("det", "stoch") or view not in ("global", "local"):
            raise UsageError(f"unknown variant {name!r}")
        return cls(stochastic=dyn == "stoch", local_view=view == "local")

    def __str__(self) -> str:
        return self.name


VARIANTS = tuple(TaskVariant(s, v) for s in (False, True) for v in (False, True))


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    block_cells: frozenset[Cell]
    agent_start: Cell
    goal_cell: Cell
    hole_cell: Cell
    spider_start: Cell

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_cells", frozenset(tuple(c) for c in self.block_cells))
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise LayoutError(f"grid must be non-empty, got {self.width}x{self.height}")
        named = {
            "agent_start": self.agent_start,
            "goal_cell": self.goal_cell,
            "hole_cell": self.hole_cell,
            "spider_start": self.spider_start,
        }
        for cell in [*named.values(), *self.block_cells]:
            if not self.in_bounds(cell):
                raise LayoutError(f"cell {cell} outside {self.width}x{self.height} grid")
        cells = list(named.values())
        if len(set(cells)) != len(cells):
            raise LayoutError(f"entity cells must be pairwise distinct: {named}")
        for key, cell in named.items():
            if cell in self.block_cells:
                raise LayoutError(f"{key} {cell} lies on a block")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_open(self, cell: Cell) -> bool:
        """Whether the agent may stand on ``cell``."""
        return self.in_bounds(cell) and cell not in self.block_cells

    def spider_can_enter(self, cell: Cell) -> bool:
        return self.is_open(cell) and cell != self.goal_cell and cell != self.hole_cell

    @functools.cached_property
    def open_mask(self) -> np.ndarray:
        """Boolean ``[x, y]`` array of cells the agent may occupy."""
        mask = np.ones((self.width, self.height), dtype=bool)
        for x, y in self.block_cells:
            mask[x, y] = False
        return mask


def default_layout() -> GridLayout:
    return GridLayout(
        width=7,
        height=7,
        block_cells=frozenset({(2, 1), (2, 2), (2, 3), (4, 3), (4, 4), (4, 5)}),
        agent_start=(0, 0),
        goal_cell=(6, 6),
        hole_cell=(6, 0),
        spider_start=(3, 3),
    )


_MAP_CHARS = {".", "#", "A", "G", "H", "S"}


def parse_map(text: str) -> GridLayout:
    """Parse a map: one row per line using ``. # A G H S``."""
    rows = [line.rstrip("\r") for line in text.splitlines() if line.strip()]
    if not rows:
        raise LayoutError("empty map")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise LayoutError("map is not rectangular")
    blocks: set[Cell] = set()
    found: dict[str, list[Cell]] = {k: [] for k in "AGHS"}
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch not in _MAP_CHARS:
                raise LayoutError(f"unknown map character {ch!r} at {(x, y)}")
            if ch == "#":
                blocks.add((x, y))
            elif ch != ".":
                found[ch].append((x, y))
    for ch, cells in found.items():
        if len(cells) != 1:
            raise LayoutError(f"map needs exactly one {ch!r}, found {len(cells)}")
    return GridLayout(
        width=width,
        height=len(rows),
        block_cells=frozenset(blocks),
        agent_start=found["A"][0],
        goal_cell=found["G"][0],
        hole_cell=found["H"][0],
        spider_start=found["S"][0],
    )


def format_map(layout: GridLayout) -> str:
    grid = [["."] * layout.width for _ in range(layout.height)]
    for x, y in layout.block_cells:
        grid[y][x] = "#"
    for ch, (x, y) in (
        ("A", layout.agent_start),
        ("G", layout.goal_cell),
        ("H", layout.hole_cell),
        ("S", layout.spider_start),
    ):
        grid[y][x] = ch
    return "\n".join("".join(row) for row in grid) + "\n"


def load_map(path: str | Path) -> GridLayout:
    return parse_map(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class GridState:
    variant: TaskVariant
    layout: GridLayout
    agent_pos: Cell
    spider_pos: Cell | None
    step_count: int = 0
    terminal: bool = False
    rng: np.random.Generator | None = field(default=None, compare=False, repr=False)
    global_size: int = GLOBAL_SIZE
    time_limit: int = TIME_LIMIT


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


def reset(
    variant: TaskVariant,
    layout: GridLayout,
    seed: int,
    *,
    global_size: int = GLOBAL_SIZE,
    time_limit: int = TIME_LIMIT,
) -> tuple[GridState, np.ndarray]:
    layout.validate()
    state = GridState(
        variant=variant,
        layout=layout,
        agent_pos=layout.agent_start,
        spider_pos=layout.spider_start if variant.stochastic else None,
        rng=np.random.default_rng(seed) if variant.stochastic else None,
        global_size=global_size,
        time_limit=time_limit,
    )
    return state, render(state)


def _moved(cell: Cell, action: int) -> Cell:
    dx, dy = MOVES[action]
    return (cell[0] + int(dx), cell[1] + int(dy))


def step(state: GridState, action: int) -> tuple[GridState, StepResult]:
    if state.terminal:
        raise UsageError("step called on a terminal state")
    if not 0 <= int(action) < NUM_ACTIONS:
        raise UsageError(f"action must be in [0, {NUM_ACTIONS}), got {action}")
    layout = state.layout

    agent = _moved(state.agent_pos, int(action))
    if not layout.is_open(agent):
        agent = state.agent_pos

    spider, rng = state.spider_pos, state.rng
    if state.variant.stochastic:
        rng = copy.deepcopy(state.rng)
        options = [c for a in range(NUM_ACTIONS) if layout.spider_can_enter(c := _moved(spider, a))]
        if options:
            spider = options[int(rng.integers(len(options)))]

    count = state.step_count + 1
    if agent == layout.goal_cell:
        reward, done = 1.0, True
    elif agent == layout.hole_cell:
        reward, done = -1.0, True
    elif spider is not None and agent == spider:
        reward, done = -1.0, True
    else:
        reward, done = 0.0, count >= state.time_limit

    nxt = replace(state, agent_pos=agent, spider_pos=spider, step_count=count, terminal=done, rng=rng)
    return nxt, StepResult(render(nxt), reward, done)


def render(state: GridState) -> np.ndarray:
    return render_local(state) if state.variant.local_view else render_global(state)


def _cell_colors(state: GridState) -> dict[Cell, tuple[float, float, float]]:
    layout = state.layout
    colors = {c: BLOCK for c in layout.block_cells}
    colors[layout.goal_cell] = GOAL
    colors[layout.hole_cell] = HOLE
    colors[state.agent_pos] = AGENT
    if state.spider_pos is not None:
        colors[state.spider_pos] = SPIDER
    return colors


@functools.lru_cache(maxsize=16)
def area_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix averaging input pixels by overlap area."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def downsample(image: np.ndarray, size: int) -> np.ndarray:
    """Area-average a channel-major ``(C, H, W)`` image to ``(C, size, size)``."""
    rows = area_resample_matrix(image.shape[1], size)
    cols = area_resample_matrix(image.shape[2], size)
    return (rows @ image) @ cols.T


def render_full(state: GridState) -> np.ndarray:
    """Full-resolution ``(3, 24*h, 24*w)`` render before rescaling."""
    layout = state.layout
    img = np.empty((3, layout.height * TILE, layout.width * TILE), dtype=np.float64)
    img[:] = np.asarray(FLOOR)[:, None, None]
    for (x, y), color in _cell_colors(state).items():
        img[:, y * TILE : (y + 1) * TILE, x * TILE : (x + 1) * TILE] = np.asarray(color)[:, None, None]
    return img


def render_global(state: GridState) -> np.ndarray:
    out = downsample(render_full(state), state.global_size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_local(state: GridState) -> np.ndarray:
    """3x3 neighbourhood around the agent; off-grid cells drawn as blocks.

    Tiles are 9x9 pixels placed at offset 1 inside a one-pixel frame along
    the top and left edges, giving a 28x28 canvas.
    """
    img = np.empty((3, LOCAL_SIZE, LOCAL_SIZE), dtype=np.float32)
    img[:] = np.asarray(FRAME, dtype=np.float32)[:, None, None]
    colors = _cell_colors(state)
    ax, ay = state.agent_pos
    for j, dy in enumerate((-1, 0, 1)):
        for i, dx in enumerate((-1, 0, 1)):
            cell = (ax + dx, ay + dy)
            color = colors.get(cell, FLOOR) if state.layout.in_bounds(cell) else BLOCK
            y0, x0 = 1 + j * LOCAL_TILE, 1 + i * LOCAL_TILE
            img[:, y0 : y0 + LOCAL_TILE, x0 : x0 + LOCAL_TILE] = np.asarray(color, dtype=np.float32)[:, None, None]
    return img


def local_cell_colors(obs: np.ndarray) -> list[tuple[float, ...]]:
    """Read back the nine cell colors (row-major) of a local observation."""
    out = []
    for j in range(3):
        for i in range(3):
            y, x = 1 + j * LOCAL_TILE + LOCAL_TILE // 2, 1 + i * LOCAL_TILE + LOCAL_TILE // 2
            out.append(tuple(float(v) for v in obs[:, y, x]))
    return out


def observation_shape(variant: TaskVariant, global_size: int = GLOBAL_SIZE) -> tuple[int, int, int]:
    return (3, LOCAL_SIZE, LOCAL_SIZE) if variant.local_view else (3, global_size, global_size)


def _bfs(layout: GridLayout, start: Cell, goal: Cell) -> dict[Cell, tuple[Cell, int] | None]:
    parents: dict[Cell, tuple[Cell, int] | None] = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            break
        for a in range(NUM_ACTIONS):
            nxt = _moved(cell, a)
            if nxt in parents or not layout.is_open(nxt) or nxt == layout.hole_cell:
                continue
            parents[nxt] = (cell, a)
            queue.append(nxt)
    return parents


def shortest_path_actions(layout: GridLayout, start: Cell | None = None, goal: Cell | None = None) -> list[int]:
    """Actions of one BFS-shortest path avoiding blocks and the hole.

    ``start`` and ``goal`` default to the layout's agent start and goal cell.
    """
    start = layout.agent_start if start is None else tuple(start)
    goal = layout.goal_cell if goal is None else tuple(goal)
    parents = _bfs(layout, start, goal)
    if goal not in parents:
        raise UnreachableError(f"goal {goal} unreachable from {start}")
    actions = []
    cell = goal
    while parents[cell] is not None:
        cell, a = parents[cell]
        actions.append(a)
    return actions[::-1]


def shortest_path_length(layout: GridLayout, start: Cell | None = None, goal: Cell | None = None) -> int:
    return len(shortest_path_actions(layout, start, goal))


class SimulatorModel:
    """Ground-truth deterministic dynamics exposed through the planner's model interface.

    Terminal states are absorbing and keep emitting their terminal reward on
    every later step, so plans that reach the goal sooner score higher.
    """

    noise_dim = 0

    def __init__(self, layout: GridLayout):
        self.layout = layout
        self._open = layout.open_mask

    def rollout_rewards(self, start: GridState, actions: np.ndarray, noise: np.ndarray) -> np.ndarray:
        if start.variant.stochastic:
            raise UsageError("SimulatorModel only models the deterministic variant")
        actions = np.asarray(actions, dtype=np.int64)
        n, horizon = actions.shape
        samples = noise.shape[1]
        layout = self.layout
        pos = np.tile(np.asarray(start.agent_pos, dtype=np.int64), (n, 1))
        done = np.full(n, start.terminal)
        last = np.zeros(n)
        count = start.step_count
        rewards = np.zeros((n, horizon))
        goal = np.asarray(layout.goal_cell)
        hole = np.asarray(layout.hole_cell)
        for t in range(horizon):
            cand = pos + MOVES[actions[:, t]]
            inside = (cand[:, 0] >= 0) & (cand[:, 0] < layout.width) & (cand[:, 1] >= 0) & (cand[:, 1] < layout.height)
            ok = inside.copy()
            ok[inside] = self._open[cand[inside, 0], cand[inside, 1]]
            ok &= ~done
            pos = np.where(ok[:, None], cand, pos)
            count += 1
            at_goal = ~done & np.all(pos == goal, axis=1)
            at_hole = ~done & np.all(pos == hole, axis=1)
            timeout = ~done & ~at_goal & ~at_hole & (count >= start.time_limit)
            last = np.where(at_goal, 1.0, np.where(at_hole, -1.0, np.where(timeout, 0.0, last)))
            done = done | at_goal | at_hole | timeout
            rewards[:, t] = np.where(done, last, 0.0)
        return np.repeat(rewards[:, None, :], samples, axis=1)
