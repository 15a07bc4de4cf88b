"""Partially observable grid-world MAPF environment.

Agents move on a 4-connected grid with static obstacles. Stepping is
deterministic; collisions cancel the offending moves and are penalised.
Agents that reach their goal are marked done and leave the board.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage


class Coord(NamedTuple):
    row: int
    col: int


class Action(IntEnum):
    WAIT = 0
    NORTH = 1
    EAST = 2
    SOUTH = 3
    WEST = 4


DELTAS = {
    Action.WAIT: (0, 0),
    Action.NORTH: (-1, 0),
    Action.EAST: (0, 1),
    Action.SOUTH: (1, 0),
    Action.WEST: (0, -1),
}


def action_between(a: Coord, b: Coord) -> Action:
    """Action that moves from cell ``a`` to the (equal or adjacent) cell ``b``."""
    delta = (b[0] - a[0], b[1] - a[1])
    for action, d in DELTAS.items():
        if d == delta:
            return action
    raise ValueError(f"cells {tuple(a)} and {tuple(b)} are not adjacent")


def apply_action(pos: Coord, action: Action) -> Coord:
    dr, dc = DELTAS[Action(action)]
    return Coord(pos[0] + dr, pos[1] + dc)


@dataclass(frozen=True)
class RewardConfig:
    move: float = -0.3
    wait_on_goal: float = 0.0
    wait_off_goal: float = -0.5
    collision: float = -5.0
    goal: float = 20.0
    episode_bonus: float = 20.0
    episode_bonus_enabled: bool = False


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 256
    fov: int = 10
    gamma: float = 1.0  # kept for completeness; returns-to-go are undiscounted
    seed: int = 0
    done_agents_block: bool = False
    rewards: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.fov != 10:
            raise ValueError("fov is fixed at 10 for model compatibility")


@dataclass
class GridMap:
    obstacles: np.ndarray  # bool, shape (height, width)

    def __post_init__(self):
        self.obstacles = np.asarray(self.obstacles, dtype=bool)
        if self.obstacles.ndim != 2:
            raise ValueError("obstacle grid must be 2-D")
        self._padded = None

    @property
    def height(self) -> int:
        return self.obstacles.shape[0]

    @property
    def width(self) -> int:
        return self.obstacles.shape[1]

    @property
    def density(self) -> float:
        return float(self.obstacles.sum()) / (self.width * self.height)

    def in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.height and 0 <= c[1] < self.width

    def is_free(self, c) -> bool:
        return self.in_bounds(c) and not self.obstacles[c[0], c[1]]

    def free_cells(self) -> list[Coord]:
        rows, cols = np.nonzero(~self.obstacles)
        return [Coord(int(r), int(c)) for r, c in zip(rows, cols)]

    def components(self) -> np.ndarray:
        """Label 4-connected free-cell components (0 marks obstacles)."""
        labels, _ = ndimage.label(~self.obstacles)
        return labels

    def padded(self, pad: int) -> np.ndarray:
        # out-of-bounds cells count as obstacles in observations
        if self._padded is None or self._padded[0] != pad:
            grid = np.pad(self.obstacles, pad, constant_values=True)
            self._padded = (pad, grid)
        return self._padded[1]

    def __eq__(self, other):
        return isinstance(other, GridMap) and np.array_equal(self.obstacles, other.obstacles)


@dataclass
class AgentState:
    id: int
    pos: Coord
    goal: Coord
    done: bool = False
    arrival_time: int | None = None


@dataclass
class WorldState:
    map: GridMap
    agents: list[AgentState]
    t: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.map, [replace(a) for a in self.agents], self.t)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def all_done(self) -> bool:
        return all(a.done for a in self.agents)


@dataclass
class StepResult:
    rewards: list[float]
    collisions: list[tuple[int, str]]
    newly_done: list[int]
    all_done: bool


class EpisodeTerminated(RuntimeError):
    pass


class InstanceSamplingError(RuntimeError):
    pass


def generate_map(width: int, height: int, density: float, seed: int) -> GridMap:
    """Random map with exactly floor(density * width * height) obstacles."""
    if width * height < 4:
        raise ValueError("map needs at least 4 cells")
    if not 0.0 <= density <= 0.5:
        raise ValueError(f"density {density} outside [0, 0.5]")
    n_cells = width * height
    n_obstacles = int(math.floor(density * n_cells + 1e-9))
    rng = np.random.default_rng(seed)
    flat = np.zeros(n_cells, dtype=bool)
    flat[rng.choice(n_cells, size=n_obstacles, replace=False)] = True
    return GridMap(flat.reshape(height, width))


def sample_instance(
    grid: GridMap, n_agents: int, seed: int, max_tries: int = 100
) -> list[tuple[Coord, Coord]]:
    """Sample distinct starts and distinct goals, each goal reachable from its start."""
    free = grid.free_cells()
    if len(free) < 2 * n_agents:
        raise InstanceSamplingError(
            f"need {2 * n_agents} free cells for {n_agents} agents, map has {len(free)}"
        )
    labels = grid.components()
    by_component: dict[int, list[Coord]] = {}
    for c in free:
        by_component.setdefault(int(labels[c]), []).append(c)
    rng = np.random.default_rng(seed)
    failure = "goal placement"
    for _ in range(max_tries):
        order = rng.permutation(len(free))
        starts = [free[i] for i in order[:n_agents]]
        used_goals: set[Coord] = set()
        pairs = []
        for s in starts:
            options = [c for c in by_component[int(labels[s])] if c != s and c not in used_goals]
            if not options:
                failure = f"no free goal in the component of start {tuple(s)}"
                break
            g = options[int(rng.integers(len(options)))]
            used_goals.add(g)
            pairs.append((s, g))
        else:
            return pairs
    raise InstanceSamplingError(f"sampling failed after {max_tries} tries: {failure}")


def reset(grid: GridMap, instance: Sequence[tuple[Coord, Coord]]) -> WorldState:
    agents = [AgentState(i, Coord(*s), Coord(*g)) for i, (s, g) in enumerate(instance)]
    cells = [a.pos for a in agents]
    if len(set(cells)) != len(cells):
        raise ValueError("agent starts must be distinct")
    for a in agents:
        if not grid.is_free(a.pos) or not grid.is_free(a.goal):
            raise ValueError(f"agent {a.id} start/goal is not a free cell")
    return WorldState(grid, agents, 0)


def is_terminal(state: WorldState, config: EpisodeConfig) -> bool:
    return state.all_done() or state.t >= config.horizon


def step(
    state: WorldState, joint_action: Sequence[int], config: EpisodeConfig = EpisodeConfig()
) -> tuple[WorldState, StepResult]:
    """Advance one timestep.

    Moves into obstacles or off the map are cancelled. Agents intending the
    same cell, or swapping cells, all stay put; the cancellation is iterated
    to a fixed point so an agent heading into a cell whose occupant was
    stopped is stopped as well. Every stopped agent is logged as a collision.
    """
    if len(joint_action) != state.n_agents:
        raise ValueError(f"expected {state.n_agents} actions, got {len(joint_action)}")
    if is_terminal(state, config):
        raise EpisodeTerminated(f"episode is over at t={state.t}")
    rc = config.rewards
    grid = state.map
    active = [a for a in state.agents if not a.done]
    blockers = set()
    if config.done_agents_block:
        blockers = {a.pos for a in state.agents if a.done}

    kind: dict[int, str] = {}
    target: dict[int, Coord] = {}
    for a in active:
        act = Action(int(joint_action[a.id]))
        nxt = apply_action(a.pos, act)
        if not grid.in_bounds(nxt):
            kind[a.id] = "out_of_bounds"
        elif grid.obstacles[nxt]:
            kind[a.id] = "obstacle"
        elif nxt in blockers:
            kind[a.id] = "vertex"
        target[a.id] = a.pos if a.id in kind else nxt

    pos = {a.id: a.pos for a in active}
    occupant = {a.pos: a.id for a in active}
    changed = True
    while changed:
        changed = False
        for a in active:
            i = a.id
            if i in kind or target[i] == pos[i]:
                continue
            j = occupant.get(target[i])
            if j is not None and target[j] == pos[i]:
                kind[i] = "edge"
                kind.setdefault(j, "edge")
                target[i], target[j] = pos[i], pos[j]
                changed = True
        claims: dict[Coord, list[int]] = {}
        for a in active:
            claims.setdefault(target[a.id], []).append(a.id)
        for cell, ids in claims.items():
            if len(ids) < 2:
                continue
            for i in ids:
                if i not in kind:
                    kind[i] = "vertex"
                if target[i] != pos[i]:
                    target[i] = pos[i]
                    changed = True

    new_state = state.copy()
    rewards = [0.0] * state.n_agents
    newly_done = []
    for a in new_state.agents:
        if a.done:
            continue
        i = a.id
        moved = target[i] != a.pos
        if i in kind:
            r = rc.collision
        elif moved:
            r = rc.move
        else:
            r = rc.wait_on_goal if a.pos == a.goal else rc.wait_off_goal
        a.pos = target[i]
        if a.pos == a.goal:
            # the goal reward is for arriving; an agent already on its goal
            # (only after a goal change onto its cell) just finishes
            if moved:
                r += rc.goal
            a.done = True
            a.arrival_time = state.t + 1
            newly_done.append(i)
        rewards[i] = r
    new_state.t = state.t + 1
    all_done = new_state.all_done()
    if rc.episode_bonus_enabled and all_done and newly_done:
        rewards = [r + rc.episode_bonus for r in rewards]
    collisions = sorted(kind.items())
    return new_state, StepResult(rewards, collisions, newly_done, all_done)


def observe(state: WorldState, agent_id: int, fov: int = 10) -> np.ndarray:
    """Four binary channels of the agent's fov x fov window.

    Channels: other agents, own goal, other agents' goals, obstacles. The
    agent sits at local cell (fov//2, fov//2); cells off the map count as
    obstacles. An out-of-window goal is clamped onto the nearest window cell.
    """
    half = fov // 2
    me = state.agents[agent_id]
    r0, c0 = me.pos[0] - half, me.pos[1] - half
    obs = np.zeros((4, fov, fov), dtype=np.uint8)
    padded = state.map.padded(fov)
    obs[3] = padded[r0 + fov : r0 + 2 * fov, c0 + fov : c0 + 2 * fov]
    for other in state.agents:
        if other.id == agent_id or other.done:
            continue
        lr, lc = other.pos[0] - r0, other.pos[1] - c0
        if 0 <= lr < fov and 0 <= lc < fov:
            obs[0, lr, lc] = 1
        lr, lc = other.goal[0] - r0, other.goal[1] - c0
        if 0 <= lr < fov and 0 <= lc < fov:
            obs[2, lr, lc] = 1
    gr = min(max(me.goal[0] - r0, 0), fov - 1)
    gc = min(max(me.goal[1] - c0, 0), fov - 1)
    obs[1, gr, gc] = 1
    return obs


# --- file formats -----------------------------------------------------------

def instance_to_json(grid: GridMap, instance, seed: int | None = None) -> dict:
    rows, cols = np.nonzero(grid.obstacles)
    return {
        "width": grid.width,
        "height": grid.height,
        "obstacles": [[int(r), int(c)] for r, c in zip(rows, cols)],
        "agents": [{"start": [int(s[0]), int(s[1])], "goal": [int(g[0]), int(g[1])]} for s, g in instance],
        "seed": seed,
    }


def instance_from_json(data: dict) -> tuple[GridMap, list[tuple[Coord, Coord]], int | None]:
    grid = np.zeros((data["height"], data["width"]), dtype=bool)
    for r, c in data["obstacles"]:
        grid[r, c] = True
    instance = [(Coord(*a["start"]), Coord(*a["goal"])) for a in data.get("agents", [])]
    return GridMap(grid), instance, data.get("seed")


def save_instance(path, grid: GridMap, instance, seed: int | None = None) -> None:
    with open(path, "w") as f:
        json.dump(instance_to_json(grid, instance, seed), f, indent=1)


def load_instance(path):
    with open(path) as f:
        return instance_from_json(json.load(f))


def render(state: WorldState) -> str:
    """Text dump: '.' free, '#' obstacle, letters for agents, lower-case goals."""
    rows = [["#" if o else "." for o in row] for row in state.map.obstacles]
    for a in state.agents:
        if not a.done and rows[a.goal[0]][a.goal[1]] == ".":
            rows[a.goal[0]][a.goal[1]] = chr(ord("a") + a.id % 26)
    for a in state.agents:
        if not a.done:
            rows[a.pos[0]][a.pos[1]] = chr(ord("A") + a.id % 26)
    return "\n".join("".join(r) for r in rows)


def parse_grid(text: str) -> GridMap:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    return GridMap(np.array([[ch == "#" for ch in ln] for ln in lines], dtype=bool))
