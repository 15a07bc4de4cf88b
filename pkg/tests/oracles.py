"""Independent reference implementations used to derive expected values.

Each of these is deliberately naive (exhaustive or textbook) and shares no
code with the package beyond the map/state containers.
"""
import heapq
import itertools
import math
from collections import deque

import numpy as np

STEPS = [(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1)]  # wait, N, E, S, W


def free(obstacles, cell):
    r, c = cell
    h, w = obstacles.shape
    return 0 <= r < h and 0 <= c < w and not obstacles[r, c]


def flood_fill(obstacles, start):
    seen = {tuple(start)}
    stack = [tuple(start)]
    while stack:
        r, c = stack.pop()
        for dr, dc in STEPS[1:]:
            n = (r + dr, c + dc)
            if free(obstacles, n) and n not in seen:
                seen.add(n)
                stack.append(n)
    return seen


def bfs_distance(obstacles, src, dst, blocked=frozenset()):
    if tuple(src) == tuple(dst):
        return 0
    dist = {tuple(src): 0}
    q = deque([tuple(src)])
    while q:
        u = q.popleft()
        for dr, dc in STEPS[1:]:
            v = (u[0] + dr, u[1] + dc)
            if free(obstacles, v) and v not in blocked and v not in dist:
                dist[v] = dist[u] + 1
                if v == tuple(dst):
                    return dist[v]
                q.append(v)
    return None


def joint_soc(obstacles, instance):
    """Optimal sum-of-costs for two agents over the joint state space.

    A state is the pair of positions, with None for an agent that has
    reached its goal (it leaves the board). Each joint step costs the number
    of agents still travelling.
    """
    (s0, g0), (s1, g1) = [(tuple(s), tuple(g)) for s, g in instance]

    def moves(p):
        if p is None:
            return [None]
        return [(p[0] + dr, p[1] + dc) for dr, dc in STEPS if free(obstacles, (p[0] + dr, p[1] + dc))]

    def settle(p, g):
        return None if p == g else p

    start = (settle(s0, g0), settle(s1, g1))
    dist = {start: 0}
    pq = [(0, 0, start)]
    counter = itertools.count(1)
    while pq:
        d, _, (a, b) = heapq.heappop(pq)
        if d != dist[(a, b)]:
            continue
        if a is None and b is None:
            return d
        cost = (a is not None) + (b is not None)
        for na, nb in itertools.product(moves(a), moves(b)):
            if na is not None and nb is not None:
                if na == nb or (na == b and nb == a):
                    continue
            nxt = (settle(na, g0), settle(nb, g1))
            if d + cost < dist.get(nxt, math.inf):
                dist[nxt] = d + cost
                heapq.heappush(pq, (d + cost, next(counter), nxt))
    return None


def spacetime_bfs(obstacles, start, goal, vertex=(), edge=(), horizon=64):
    """Earliest arrival time under vertex constraints {(t, cell)} and edge
    constraints {(t, prev, cell)} (no move prev->cell arriving at t)."""
    vertex, edge = set(vertex), set(edge)
    start, goal = tuple(start), tuple(goal)
    if (0, start) in vertex:
        return None
    if start == goal:
        return 0
    layer = {start}
    for t in range(1, horizon + 1):
        nxt = set()
        for u in layer:
            for dr, dc in STEPS:
                v = (u[0] + dr, u[1] + dc)
                if free(obstacles, v) and (t, v) not in vertex and (t, u, v) not in edge:
                    nxt.add(v)
        if goal in nxt:
            return t
        layer = nxt
    return None


def project_observation(obstacles, agents, me, fov=10):
    """Observation by visiting every window cell. ``agents`` is a list of
    (pos, goal, done) tuples."""
    h, w = obstacles.shape
    half = fov // 2
    pos, goal, _ = agents[me]
    out = np.zeros((4, fov, fov), np.uint8)
    best = None
    for i in range(fov):
        for j in range(fov):
            r, c = pos[0] - half + i, pos[1] - half + j
            out[3, i, j] = not (0 <= r < h and 0 <= c < w) or bool(obstacles[r, c])
            for k, (p, g, done) in enumerate(agents):
                if k == me or done:
                    continue
                if tuple(p) == (r, c):
                    out[0, i, j] = 1
                if tuple(g) == (r, c):
                    out[2, i, j] = 1
            d = abs(goal[0] - r) + abs(goal[1] - c)
            if best is None or d < best[0]:
                best = (d, i, j)
    out[1, best[1], best[2]] = 1
    return out


def suffix_sums(rewards):
    return [math.fsum(rewards[t:]) for t in range(len(rewards))]


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar f at numpy vector x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return g
