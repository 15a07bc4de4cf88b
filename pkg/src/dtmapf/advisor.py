"""Full-observability advisors: a shortest-path oracle and an LLM client.

The LLM is asked for one joint step at a time. Its reply must end with an
answer block::

    ANSWER:
    agent 0: EAST
    agent 3: WAIT

Anything the parser cannot read degrades to a per-agent fallback.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx

from .env import DELTAS, Action, Coord, WorldState
from .policy import Policy

log = logging.getLogger(__name__)

MOVE_ORDER = (Action.NORTH, Action.EAST, Action.SOUTH, Action.WEST)


@dataclass(frozen=True)
class AgentView:
    id: int
    pos: Coord
    goal: Coord
    done: bool


@dataclass(frozen=True)
class WorldSnapshot:
    width: int
    height: int
    obstacles: tuple
    agents: tuple
    t: int

    @classmethod
    def from_state(cls, state: WorldState) -> "WorldSnapshot":
        rows, cols = state.map.obstacles.nonzero()
        return cls(
            state.map.width,
            state.map.height,
            tuple(Coord(int(r), int(c)) for r, c in zip(rows, cols)),
            tuple(AgentView(a.id, Coord(*a.pos), Coord(*a.goal), a.done) for a in state.agents),
            state.t,
        )

    def agent(self, agent_id: int) -> AgentView:
        return self.agents[agent_id]

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "obstacles": [list(o) for o in self.obstacles],
            "agents": [{"id": a.id, "pos": list(a.pos), "goal": list(a.goal), "done": a.done} for a in self.agents],
            "t": self.t,
        }


def _distance_map(snapshot: WorldSnapshot, goal: Coord, blocked: set) -> dict:
    dist = {goal: 0}
    if goal in blocked:
        return {}
    queue = deque([goal])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
            n = (r + dr, c + dc)
            if 0 <= n[0] < snapshot.height and 0 <= n[1] < snapshot.width and n not in blocked and n not in dist:
                dist[n] = dist[(r, c)] + 1
                queue.append(n)
    return dist


def oracle_advise(snapshot: WorldSnapshot, agent_ids: Sequence[int]) -> dict[int, Action]:
    """One step along a shortest path for each agent, other agents' current
    cells treated as obstacles. Wait when no path exists."""
    obstacles = set(map(tuple, snapshot.obstacles))
    out = {}
    for i in agent_ids:
        me = snapshot.agent(i)
        if me.done:
            raise ValueError(f"agent {i} is done")
        others = {tuple(a.pos) for a in snapshot.agents if a.id != i and not a.done}
        dist = _distance_map(snapshot, tuple(me.goal), obstacles | others)
        d = dist.get(tuple(me.pos))
        out[i] = Action.WAIT
        if d is None or d == 0:
            continue
        for a in MOVE_ORDER:
            dr, dc = DELTAS[a]
            if dist.get((me.pos[0] + dr, me.pos[1] + dc)) == d - 1:
                out[i] = a
                break
    return out


# --- prompts -----------------------------------------------------------------

SYSTEM_PREAMBLE = """\
You are coordinating a team of agents in a multi-agent path finding (MAPF) problem.

Environment:
- The world is a grid of cells addressed as (row, col); (0, 0) is the top-left cell.
- Rows grow downwards and columns grow to the right.
- Some cells are static obstacles. Cells outside the grid cannot be entered.

Actions (one per agent per timestep):
- WAIT: stay in the current cell
- NORTH: row - 1
- EAST: col + 1
- SOUTH: row + 1
- WEST: col - 1

Constraints:
- An agent may not move into an obstacle or off the grid.
- Two agents may not occupy the same cell at the same timestep.
- Two agents may not swap cells in a single timestep.
- An agent that reaches its goal leaves the grid.

Task:
You are given the full state of the world and the ids of the agents you control.
Choose the next action for each controlled agent so that it moves towards its goal
along a short collision-free route. Think step by step, then finish your reply with
the answer block: a line containing only "ANSWER:" followed by exactly one line per
controlled agent in the form "agent <id>: <ACTION>".
"""


@dataclass
class PromptBundle:
    system: str
    examples: list  # [(question, answer), ...]
    query: str
    obstacle_scope: str = "full"

    def messages(self) -> list[dict]:
        msgs = [{"role": "system", "content": self.system}]
        for q, a in self.examples:
            msgs.append({"role": "user", "content": q})
            msgs.append({"role": "assistant", "content": a})
        msgs.append({"role": "user", "content": self.query})
        return msgs

    def text(self) -> str:
        return "\n\n".join(m["content"] for m in self.messages())

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.messages(), sort_keys=True).encode()).hexdigest()


class PromptTooLarge(ValueError):
    pass


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def _fmt(c) -> str:
    return f"({c[0]}, {c[1]})"


def describe(snapshot: WorldSnapshot, controlled: Sequence[int], obstacles=None) -> str:
    obstacles = snapshot.obstacles if obstacles is None else obstacles
    lines = [
        f"Grid: {snapshot.height} rows x {snapshot.width} columns. Timestep: {snapshot.t}.",
        "Obstacles (row, col): " + (", ".join(_fmt(o) for o in obstacles) if obstacles else "none"),
        "Agents:",
    ]
    for a in snapshot.agents:
        if a.done:
            continue
        tag = " [controlled]" if a.id in controlled else ""
        lines.append(f"- agent {a.id}: position {_fmt(a.pos)}, goal {_fmt(a.goal)}{tag}")
    lines.append("Controlled agents: " + ", ".join(str(i) for i in controlled))
    lines.append("Give the next action for every controlled agent.")
    return "\n".join(lines)


def _window_obstacles(snapshot: WorldSnapshot, controlled: Sequence[int], fov: int = 10) -> tuple:
    half = fov // 2
    keep = []
    for o in snapshot.obstacles:
        for i in controlled:
            p = snapshot.agent(i).pos
            if p[0] - half <= o[0] < p[0] - half + fov and p[1] - half <= o[1] < p[1] - half + fov:
                keep.append(o)
                break
    return tuple(keep)


@dataclass
class CuratedExample:
    snapshot: WorldSnapshot
    controlled: tuple
    reasoning: str

    def question(self) -> str:
        return describe(self.snapshot, self.controlled)

    def answer(self) -> str:
        acts = oracle_advise(self.snapshot, self.controlled)
        block = "\n".join(f"agent {i}: {acts[i].name}" for i in self.controlled)
        return f"{self.reasoning}\nANSWER:\n{block}"


def _views(*agents):
    return tuple(AgentView(i, Coord(*p), Coord(*g), False) for i, (p, g) in enumerate(agents))


DEFAULT_EXAMPLES = (
    CuratedExample(
        WorldSnapshot(6, 6, (Coord(2, 2),), _views(((1, 1), (1, 4))), 3),
        (0,),
        "Agent 0 is at (1, 1) and its goal (1, 4) is in the same row, three columns to the east. "
        "Cells (1, 2) and (1, 3) are free and no other agent is in the way, so it should move EAST.",
    ),
    CuratedExample(
        WorldSnapshot(
            7,
            5,
            tuple(Coord(2, c) for c in (0, 1, 2, 3, 5, 6)),
            _views(((3, 1), (0, 1)), ((1, 5), (4, 5))),
            12,
        ),
        (0, 1),
        "Row 2 is a wall with a single gap at (2, 4). Agent 0 at (3, 1) must reach (0, 1) on the other "
        "side, so it has to head for the gap: moving EAST along row 3 shortens its route. Agent 1 at "
        "(1, 5) must cross the wall the other way to reach (4, 5); it moves WEST to (1, 4), directly "
        "above the gap. Agent 0 is still three steps from the gap, so the two moves cannot collide.",
    ),
)


def build_prompt(
    snapshot: WorldSnapshot,
    controlled: Sequence[int],
    examples: Sequence[CuratedExample] = DEFAULT_EXAMPLES,
    max_tokens: int = 6000,
) -> PromptBundle:
    """Deterministic prompt: preamble, curated examples, then the query.

    If the prompt is over ``max_tokens``, obstacles are first limited to the
    controlled agents' 10x10 windows, then the list is cut; a prompt that
    still does not fit raises PromptTooLarge.
    """
    controlled = sorted(set(int(i) for i in controlled))
    if not controlled:
        raise ValueError("no controlled agents to ask about")
    shots = [(e.question(), e.answer()) for e in examples]
    fixed = estimate_tokens(SYSTEM_PREAMBLE) + sum(estimate_tokens(q) + estimate_tokens(a) for q, a in shots)

    def fits(q):
        return fixed + estimate_tokens(q) <= max_tokens

    query = describe(snapshot, controlled)
    scope = "full"
    if not fits(query):
        obs = _window_obstacles(snapshot, controlled)
        query, scope = describe(snapshot, controlled, obs), "fov"
        if not fits(query):
            scope = "truncated"
            while obs and not fits(query):
                obs = obs[: len(obs) // 2]
                query = describe(snapshot, controlled, obs)
            if not fits(query):
                raise PromptTooLarge(f"prompt needs {fixed + estimate_tokens(query)} tokens > {max_tokens}")
    return PromptBundle(SYSTEM_PREAMBLE, shots, query, scope)


# --- parsing -----------------------------------------------------------------

_ANSWER_RE = re.compile(r"^\s*[#*`]*\s*answer\s*[#*`]*\s*:?\s*[*`]*\s*$", re.IGNORECASE)
_LINE_RE = re.compile(r"^\s*[-*`]*\s*agent\s+(\d+)\s*[:=\-]\s*[`*]*\s*([A-Za-z_]+)\s*[`*.]*\s*$", re.IGNORECASE)


@dataclass
class AdvisorResponse:
    actions: dict  # agent id -> Action, or None when deferring
    raw: str
    status: dict  # agent id -> "ok" or fallback reason


def _answer_lines(text: str) -> list[str]:
    lines = text.splitlines()
    marks = [k for k, ln in enumerate(lines) if _ANSWER_RE.match(ln)]
    if marks:
        return lines[marks[-1] + 1 :]
    # no marker: take the trailing run of agent lines
    block: list[str] = []
    for ln in reversed(lines):
        if not ln.strip() and not block:
            continue
        if _LINE_RE.match(ln):
            block.append(ln)
        else:
            break
    return block[::-1]


def parse_response(text: str, controlled: Sequence[int], fallback: Action | None = Action.WAIT) -> AdvisorResponse:
    """Read the answer block. Agents without a readable action get ``fallback``
    (None means defer to another policy) and a recorded reason."""
    found: dict[int, str] = {}
    dupes = set()
    for ln in _answer_lines(text or ""):
        m = _LINE_RE.match(ln)
        if not m:
            continue
        i = int(m.group(1))
        if i in found and found[i].upper() != m.group(2).upper():
            dupes.add(i)
        found.setdefault(i, m.group(2))
    actions, status = {}, {}
    for i in controlled:
        name = found.get(i)
        if name is None:
            reason = "missing from answer block"
        elif i in dupes:
            reason = "conflicting duplicate answers"
        elif name.upper() not in Action.__members__:
            reason = f"unknown action {name!r}"
        else:
            actions[i], status[i] = Action[name.upper()], "ok"
            continue
        actions[i], status[i] = fallback, reason
    return AdvisorResponse(actions, text, status)


# --- transport ---------------------------------------------------------------

class TransportError(RuntimeError):
    pass


@dataclass
class LLMClientConfig:
    url: str | None = None  # defaults to $LLM_API_URL
    model: str = "gpt-4o"
    api_key_env: str = "LLM_API_KEY"
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5
    temperature: float = 0.0
    log_path: str | None = None
    max_prompt_tokens: int = 6000


class LLMClient:
    """Chat-completions style HTTP client with retries and JSONL audit log."""

    def __init__(self, config: LLMClientConfig = LLMClientConfig(), transport: httpx.BaseTransport | None = None):
        self.config = config
        self.url = config.url or os.environ.get("LLM_API_URL")
        if not self.url:
            raise ValueError("no LLM endpoint: set LLMClientConfig.url or LLM_API_URL")
        self._http = httpx.Client(timeout=config.timeout, transport=transport)

    def _log(self, entry: dict) -> None:
        if self.config.log_path:
            with open(self.config.log_path, "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def complete(self, messages: list[dict]) -> str:
        body = {"model": self.config.model, "messages": messages, "temperature": self.config.temperature}
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        prompt_hash = hashlib.sha256(json.dumps(messages, sort_keys=True).encode()).hexdigest()
        last = None
        for attempt in range(self.config.retries + 1):
            t0 = time.perf_counter()
            entry = {"prompt_sha256": prompt_hash, "attempt": attempt, "request": body}
            try:
                resp = self._http.post(self.url, json=body, headers=headers)
                entry["latency"] = time.perf_counter() - t0
                entry["status_code"] = resp.status_code
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = TransportError(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    self._log(entry | {"error": resp.text[:500]})
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    content = resp.json()["choices"][0]["message"]["content"]
                    self._log(entry | {"response": content})
                    log.info("llm call ok hash=%s latency=%.3fs", prompt_hash[:12], entry["latency"])
                    return content
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                entry["latency"] = time.perf_counter() - t0
                last = TransportError(f"{type(exc).__name__}: {exc}")
            except (KeyError, IndexError, ValueError) as exc:
                last = TransportError(f"malformed response body: {exc}")
            self._log(entry | {"error": str(last)})
            log.warning("llm call failed (attempt %d): %s", attempt + 1, last)
            if attempt < self.config.retries and self.config.backoff:
                time.sleep(self.config.backoff * 2**attempt)
        raise TransportError(f"giving up after {self.config.retries + 1} attempts: {last}")

    def close(self):
        self._http.close()


class LLMAdvisor:
    """Callable advisor backed by an LLM.

    ``transport_fallback`` is used for every agent when the call fails
    ("oracle" or "wait"); ``parse_fallback`` for agents whose answer cannot be
    read ("wait", "oracle" or "defer").
    """

    def __init__(
        self,
        client: LLMClient,
        examples: Sequence[CuratedExample] = DEFAULT_EXAMPLES,
        transport_fallback: str = "oracle",
        parse_fallback: str = "wait",
    ):
        self.client = client
        self.examples = examples
        self.transport_fallback = transport_fallback
        self.parse_fallback = parse_fallback
        self.history: list[dict] = []

    def __call__(self, snapshot: WorldSnapshot, agent_ids: Sequence[int]) -> dict:
        ids = list(agent_ids)
        bundle = build_prompt(snapshot, ids, self.examples, self.client.config.max_prompt_tokens)
        t0 = time.perf_counter()
        try:
            text = self.client.complete(bundle.messages())
        except TransportError as exc:
            if self.transport_fallback == "oracle":
                acts = oracle_advise(snapshot, ids)
            else:
                acts = {i: Action.WAIT for i in ids}
            self.history.append(
                {"t": snapshot.t, "prompt_sha256": bundle.sha256(), "status": {i: f"transport: {exc}" for i in ids}}
            )
            return acts
        fb = {"wait": Action.WAIT, "defer": None, "oracle": Action.WAIT}[self.parse_fallback]
        resp = parse_response(text, ids, fb)
        if self.parse_fallback == "oracle":
            bad = [i for i in ids if resp.status[i] != "ok"]
            if bad:
                resp.actions.update(oracle_advise(snapshot, bad))
        self.history.append(
            {"t": snapshot.t, "prompt_sha256": bundle.sha256(), "latency": time.perf_counter() - t0, "status": resp.status}
        )
        log.info("llm advice t=%d status=%s", snapshot.t, resp.status)
        return resp.actions


def llm_advise(snapshot: WorldSnapshot, agent_ids: Sequence[int], client: LLMClient, **kwargs) -> dict:
    return LLMAdvisor(client, **kwargs)(snapshot, agent_ids)


class AdvisorPolicy(Policy):
    """Drives agents from a full-state advisor, one joint query per timestep."""

    def __init__(self, advise: Callable = oracle_advise, name: str = "advisor", defer_to: Policy | None = None):
        self.advise = advise
        self.name = name
        self.defer_to = defer_to

    def act_many(self, agent_ids, observations, world, t):
        if not agent_ids:
            return {}
        snap = WorldSnapshot.from_state(world)
        advice = self.advise(snap, list(agent_ids))
        out = {i: advice.get(i) for i in agent_ids}
        deferred = [i for i, a in out.items() if a is None]
        if deferred:
            if self.defer_to is not None:
                out.update(self.defer_to.act_many(deferred, {i: observations[i] for i in deferred}, world, t))
            else:
                out.update({i: Action.WAIT for i in deferred})
        return out
