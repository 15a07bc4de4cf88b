"""Centralised expert planning: space-time A*, conflict-based search, and
prioritized planning, plus plan validation.

Planning uses the same occupancy semantics as the environment: an agent is
on the board from t=0 until it first reaches its goal, then it vanishes.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import DELTAS, Action, Coord, GridMap

log = logging.getLogger(__name__)


class PlanningFailure(RuntimeError):
    def __init__(self, reason: str, agent: int | None = None, blocking: int | None = None):
        super().__init__(reason)
        self.reason = reason
        self.agent = agent
        self.blocking = blocking


class MalformedPathError(ValueError):
    pass


@dataclass(frozen=True)
class Constraint:
    """Agent may not be at ``cell`` at time ``t``; with ``prev`` set, it may
    not move ``prev -> cell`` arriving at time ``t``."""

    agent: int
    t: int
    cell: Coord
    prev: Coord | None = None

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("constraint timestep must be >= 0")


@dataclass(frozen=True)
class Conflict:
    kind: str  # "vertex" or "edge"
    agents: tuple[int, int]
    location: tuple  # cell for vertex, (cell_a, cell_b) for edge: agents[0] moves a->b
    timestep: int  # vertex: time of co-location; edge: swap happens between t and t+1

    @property
    def order_key(self):
        t = self.timestep if self.kind == "vertex" else self.timestep + 0.5
        return (t, self.agents, self.kind)


@dataclass
class JointPlan:
    paths: list[list[Coord]]

    @property
    def arrival_times(self) -> list[int]:
        return [len(p) - 1 for p in self.paths]

    @property
    def soc(self) -> int:
        return sum(self.arrival_times)

    @property
    def makespan(self) -> int:
        return max(self.arrival_times, default=0)

    def to_json(self) -> dict:
        return {
            "paths": [[[int(r), int(c)] for r, c in p] for p in self.paths],
            "soc": self.soc,
            "makespan": self.makespan,
        }

    @classmethod
    def from_json(cls, data: dict) -> "JointPlan":
        plan = cls([[Coord(r, c) for r, c in p] for p in data["paths"]])
        if "soc" in data and data["soc"] != plan.soc:
            raise ValueError("stored soc disagrees with paths")
        if "makespan" in data and data["makespan"] != plan.makespan:
            raise ValueError("stored makespan disagrees with paths")
        return plan


class _Graph:
    """Flat-index adjacency of a grid map with cached goal distance maps."""

    def __init__(self, grid: GridMap):
        self.grid = grid
        self.w = grid.width
        free = ~grid.obstacles.ravel()
        self.free = free
        # successor lists in action order: wait, N, E, S, W
        self.succ: list[tuple[int, ...]] = []
        for idx in range(free.size):
            r, c = divmod(idx, self.w)
            out = []
            for a in Action:
                dr, dc = DELTAS[a]
                nr, nc = r + dr, c + dc
                if grid.in_bounds((nr, nc)) and free[nr * self.w + nc]:
                    out.append(nr * self.w + nc)
            self.succ.append(tuple(out))
        self._dist: dict[int, list[int]] = {}

    def idx(self, c) -> int:
        return c[0] * self.w + c[1]

    def coord(self, i: int) -> Coord:
        return Coord(*divmod(i, self.w))

    def distances(self, goal: int) -> list[int]:
        """BFS distance to ``goal`` for every cell (-1 if unreachable)."""
        d = self._dist.get(goal)
        if d is None:
            d = [-1] * len(self.succ)
            d[goal] = 0
            queue = deque([goal])
            while queue:
                u = queue.popleft()
                for v in self.succ[u]:
                    if d[v] < 0:
                        d[v] = d[u] + 1
                        queue.append(v)
            self._dist[goal] = d
        return d


def _astar(
    graph: _Graph,
    start: int,
    goal: int,
    vertex: set,
    edge: set,
    horizon: int,
    max_ct: int,
) -> list[int] | None:
    h = graph.distances(goal)
    if h[start] < 0 or h[start] > horizon:
        return None
    succ = graph.succ
    counter = itertools.count()
    nodes = [(start, 0, -1)]
    heap = [(h[start], 0, next(counter), 0)]
    closed = set()
    cap = max_ct + 1
    while heap:
        _, neg_g, _, ni = heapq.heappop(heap)
        cell, g, _ = nodes[ni]
        if cell == goal:
            path = []
            while ni >= 0:
                path.append(nodes[ni][0])
                ni = nodes[ni][2]
            return path[::-1]
        key = (cell, g if g < cap else cap)
        if key in closed:
            continue
        closed.add(key)
        ng = g + 1
        for nxt in succ[cell]:
            hn = h[nxt]
            if ng + hn > horizon:
                continue
            if ng <= max_ct and ((nxt, ng) in vertex or (cell, nxt, ng) in edge):
                continue
            if (nxt, ng if ng < cap else cap) in closed:
                continue
            nodes.append((nxt, ng, ni))
            heapq.heappush(heap, (ng + hn, -ng, next(counter), len(nodes) - 1))
    return None


def _constraint_sets(graph: _Graph, constraints: Sequence[Constraint]):
    vertex, edge, max_ct = set(), set(), 0
    for c in constraints:
        if c.prev is None:
            vertex.add((graph.idx(c.cell), c.t))
        else:
            edge.add((graph.idx(c.prev), graph.idx(c.cell), c.t))
        max_ct = max(max_ct, c.t)
    return vertex, edge, max_ct


def single_agent_astar(
    grid: GridMap,
    start: Coord,
    goal: Coord,
    constraints: Sequence[Constraint] = (),
    horizon: int = 256,
    graph: _Graph | None = None,
) -> list[Coord] | None:
    """Shortest space-time path from start to goal, or None.

    Each step either waits or moves to a 4-neighbour. The search stops the
    first time the goal is reached, since the agent leaves the board there.
    """
    if not grid.is_free(start) or not grid.is_free(goal):
        raise ValueError("start and goal must be free cells")
    graph = graph or _Graph(grid)
    vertex, edge, max_ct = _constraint_sets(graph, constraints)
    path = _astar(graph, graph.idx(start), graph.idx(goal), vertex, edge, horizon, max_ct)
    return None if path is None else [graph.coord(i) for i in path]


def find_conflicts(
    paths: Sequence[Sequence], vacate: bool = True, first_only: bool = False
) -> list[Conflict]:
    """All vertex and edge conflicts between pairs of paths.

    With ``vacate`` an agent is absent after the last cell of its path;
    otherwise it holds its last cell until the longest path ends.
    """
    horizon = max((len(p) for p in paths), default=0)
    occ: dict[tuple, list[int]] = {}
    for i, p in enumerate(paths):
        end = len(p) if vacate else horizon
        for t in range(end):
            occ.setdefault((t, tuple(p[min(t, len(p) - 1)])), []).append(i)
    found = []
    for (t, cell), ids in occ.items():
        for a, b in itertools.combinations(ids, 2):
            found.append(Conflict("vertex", (a, b), Coord(*cell), t))
    for i, p in enumerate(paths):
        for t in range(len(p) - 1):
            u, v = tuple(p[t]), tuple(p[t + 1])
            if u == v:
                continue
            for j in occ.get((t, v), ()):
                if j > i and j in occ.get((t + 1, u), ()):
                    found.append(Conflict("edge", (i, j), (Coord(*u), Coord(*v)), t))
    found.sort(key=lambda c: c.order_key)
    if first_only:
        return found[:1]
    return found


def validate_plan(grid: GridMap, plan: JointPlan, vacate: bool = True) -> list[Conflict]:
    """Return every conflict in ``plan``; raises MalformedPathError for paths
    that leave the free cells or jump between non-adjacent cells."""
    for i, p in enumerate(plan.paths):
        if len(p) == 0:
            raise MalformedPathError(f"agent {i} has an empty path")
        for t, c in enumerate(p):
            if not grid.is_free(c):
                raise MalformedPathError(f"agent {i} at t={t} is on a blocked cell {tuple(c)}")
            if t and abs(c[0] - p[t - 1][0]) + abs(c[1] - p[t - 1][1]) > 1:
                raise MalformedPathError(f"agent {i} jumps between t={t - 1} and t={t}")
    return find_conflicts(plan.paths, vacate=vacate)


@dataclass(order=True)
class _CTNode:
    cost: int
    n_conflicts: int
    seq: int
    constraints: dict = field(compare=False)
    paths: list = field(compare=False)


def _count_conflicts(paths) -> int:
    return len(find_conflicts(paths))


def plan_cbs(
    grid: GridMap,
    instance: Sequence[tuple[Coord, Coord]],
    horizon: int = 256,
    node_budget: int = 100_000,
    time_limit: float | None = None,
) -> JointPlan:
    """Sum-of-costs optimal conflict-based search.

    Constraint-tree nodes are expanded best-first on (soc, #conflicts,
    creation order); each expansion splits on the earliest conflict.
    Raises PlanningFailure when the tree is exhausted or the budget runs out.
    """
    graph = _Graph(grid)
    starts = [graph.idx(s) for s, _ in instance]
    goals = [graph.idx(g) for _, g in instance]

    def low_level(agent, cons):
        vertex, edge, max_ct = _constraint_sets(graph, cons)
        return _astar(graph, starts[agent], goals[agent], vertex, edge, horizon, max_ct)

    root_paths = []
    for i in range(len(instance)):
        p = low_level(i, ())
        if p is None:
            raise PlanningFailure(f"agent {i} cannot reach its goal", agent=i)
        root_paths.append([graph.coord(c) for c in p])

    seq = itertools.count()
    root = _CTNode(sum(len(p) - 1 for p in root_paths), _count_conflicts(root_paths), next(seq), {}, root_paths)
    heap = [root]
    generated = 1
    t0 = time.monotonic()
    while heap:
        node = heapq.heappop(heap)
        conflicts = find_conflicts(node.paths, first_only=True)
        if not conflicts:
            return JointPlan(node.paths)
        c = conflicts[0]
        if c.kind == "vertex":
            branches = [Constraint(a, c.timestep, c.location) for a in c.agents]
        else:
            u, v = c.location
            branches = [
                Constraint(c.agents[0], c.timestep + 1, v, prev=u),
                Constraint(c.agents[1], c.timestep + 1, u, prev=v),
            ]
        for con in branches:
            if generated >= node_budget:
                raise PlanningFailure(f"node budget {node_budget} exhausted")
            if time_limit is not None and time.monotonic() - t0 > time_limit:
                raise PlanningFailure(f"time limit {time_limit}s exceeded")
            agent = con.agent
            cons = dict(node.constraints)
            cons[agent] = cons.get(agent, ()) + (con,)
            p = low_level(agent, cons[agent])
            generated += 1
            if p is None:
                continue
            paths = list(node.paths)
            paths[agent] = [graph.coord(x) for x in p]
            cost = sum(len(q) - 1 for q in paths)
            heapq.heappush(heap, _CTNode(cost, _count_conflicts(paths), next(seq), cons, paths))
    raise PlanningFailure("constraint tree exhausted: no conflict-free plan within horizon")


def plan_prioritized(
    grid: GridMap,
    instance: Sequence[tuple[Coord, Coord]],
    order: Sequence[int] | None = None,
    horizon: int = 256,
) -> JointPlan:
    """Plan agents one at a time; later agents avoid earlier agents' paths."""
    graph = _Graph(grid)
    n = len(instance)
    order = list(range(n)) if order is None else list(order)
    if sorted(order) != list(range(n)):
        raise ValueError("priority order must be a permutation of agent ids")
    vertex: set = set()
    edge: set = set()
    max_ct = 0
    paths: list = [None] * n
    for i in order:
        s, g = graph.idx(instance[i][0]), graph.idx(instance[i][1])
        p = _astar(graph, s, g, vertex, edge, horizon, max_ct)
        if p is None:
            free_path = _astar(graph, s, g, set(), set(), horizon, 0)
            blocking = None
            if free_path is not None:
                trial = [q for q in paths if q is not None]
                ids = [j for j in range(n) if paths[j] is not None]
                cand = [graph.coord(x) for x in free_path]
                hits = find_conflicts(trial + [cand])
                hits = [h for h in hits if len(trial) in h.agents]
                if hits:
                    other = [a for a in hits[0].agents if a != len(trial)][0]
                    blocking = ids[other]
            raise PlanningFailure(f"agent {i} has no path around higher-priority agents", agent=i, blocking=blocking)
        for t, x in enumerate(p):
            vertex.add((x, t))
            if t:
                # forbid the reverse move (swap) for later agents
                edge.add((x, p[t - 1], t))
        max_ct = max(max_ct, len(p))
        paths[i] = [graph.coord(x) for x in p]
    return JointPlan(paths)


def plan_with_fallback(
    grid: GridMap,
    instance: Sequence[tuple[Coord, Coord]],
    horizon: int = 256,
    node_budget: int = 100_000,
    restarts: int = 10,
    seed: int = 0,
    time_limit: float | None = None,
) -> tuple[JointPlan, str]:
    """CBS first; on budget exhaustion, prioritized planning with up to
    ``restarts`` priority orders (identity, then seeded shuffles)."""
    try:
        return plan_cbs(grid, instance, horizon, node_budget, time_limit), "cbs"
    except PlanningFailure as exc:
        log.info("cbs failed (%s), trying prioritized planning", exc)
    rng = np.random.default_rng(seed)
    order = list(range(len(instance)))
    last = None
    for attempt in range(restarts):
        try:
            return plan_prioritized(grid, instance, order, horizon), "prioritized"
        except PlanningFailure as exc:
            last = exc
            order = [int(x) for x in rng.permutation(len(instance))]
    raise PlanningFailure(f"all planners failed: {last}")
