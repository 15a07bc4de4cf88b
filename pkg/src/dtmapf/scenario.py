"""Evaluation protocols: static runs with late rescue, and a single goal
change followed by a short full-observability advisor window."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .env import Coord, EpisodeConfig, GridMap, WorldState, generate_map, sample_instance
from .policy import EpisodeRecord, EpisodeRunner, Policy

log = logging.getLogger(__name__)

T_CHANGE = {20: 15, 40: 30, 80: 50}
WINDOW = 5
MODES = ("static", "static_rescue", "dynamic")


class ScenarioError(RuntimeError):
    """A goal change could not be realised (e.g. no free reachable cell)."""


@dataclass
class ScenarioConfig:
    mode: str = "dynamic"
    t_change: int | None = None
    fraction: float = 0.25
    window: int = WINDOW
    advisor: str = "oracle"  # oracle | llm | none
    rescue_budget: int | None = None  # default horizon // 2
    advise_all_unfinished: bool = False
    horizon: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.advisor not in ("oracle", "llm", "none"):
            raise ValueError(f"unknown advisor {self.advisor!r}")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.mode == "dynamic":
            if self.t_change is None:
                raise ValueError("dynamic scenarios need t_change")
            if not 0 <= self.t_change < self.horizon - self.window:
                raise ValueError(f"t_change {self.t_change} must be < horizon - window = {self.horizon - self.window}")
            if not 0 < self.fraction <= 1:
                raise ValueError("fraction must be in (0, 1]")
        if self.mode == "static_rescue" and not 0 <= self.budget < self.horizon:
            raise ValueError(f"rescue budget {self.budget} must be in [0, horizon)")

    @property
    def budget(self) -> int:
        return self.horizon // 2 if self.rescue_budget is None else self.rescue_budget

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GoalChangeEvent:
    t_change: int
    n_affected: int
    seed: int
    agent_ids: list | None = None  # filled in when realised
    new_goals: list | None = None

    def realize(self, state: WorldState) -> "GoalChangeEvent":
        """Pick affected agents among the not-done ones and give each a new
        reachable free goal, distinct from every current goal."""
        rng = np.random.default_rng([self.seed, self.t_change])
        live = [a.id for a in state.agents if not a.done]
        k = min(self.n_affected, len(live))
        chosen = sorted(int(i) for i in rng.choice(live, size=k, replace=False)) if k else []
        labels = state.map.components()
        taken = {tuple(a.goal) for a in state.agents}
        goals = []
        for i in chosen:
            pos = state.agents[i].pos
            cells = np.argwhere(labels == labels[pos])
            cands = [tuple(map(int, c)) for c in cells if tuple(c) != tuple(pos) and tuple(c) not in taken]
            if not cands:
                raise ScenarioError(f"no valid new goal for agent {i} at {tuple(pos)}")
            g = cands[int(rng.integers(len(cands)))]
            taken.add(g)
            goals.append(list(g))
        return replace(self, agent_ids=chosen, new_goals=goals)


def make_scenario(
    size: int,
    n_agents: int,
    fraction: float,
    seed: int,
    window: int = WINDOW,
    horizon: int = 256,
    advisor: str = "oracle",
    t_change: int | None = None,
    advise_all_unfinished: bool = False,
) -> tuple[GoalChangeEvent, ScenarioConfig]:
    if t_change is None:
        if size not in T_CHANGE:
            raise ValueError(f"no default change time for size {size}; pass t_change")
        t_change = T_CHANGE[size]
    n = math.ceil(fraction * n_agents - 1e-9)
    if n < 1:
        raise ValueError(f"fraction {fraction} of {n_agents} agents affects nobody")
    cfg = ScenarioConfig("dynamic", t_change, fraction, window, advisor, None, advise_all_unfinished, horizon, seed)
    return GoalChangeEvent(t_change, n, seed), cfg


class HybridController:
    """Per-agent DT/ADVISOR state machine, run as an EpisodeRunner hook."""

    def __init__(self, dt: Policy, advisor: Policy | None):
        self.dt = dt
        self.advisor = advisor
        self.mode: dict[int, str] = {}
        self.until: dict[int, int] = {}

    def remaining(self, agent_id: int, t: int) -> int:
        return max(0, self.until.get(agent_id, t) - t) if self.mode.get(agent_id) == "ADVISOR" else 0

    def hand_over(self, runner: EpisodeRunner, ids, until: int) -> None:
        if self.advisor is None or until <= runner.t:
            return
        for i in ids:
            if not runner.state.agents[i].done:
                self.mode[i], self.until[i] = "ADVISOR", until
                runner.set_controller(i, self.advisor)

    def revert_expired(self, runner: EpisodeRunner) -> None:
        for i, m in list(self.mode.items()):
            if m == "ADVISOR" and runner.t >= self.until[i]:
                self.mode[i] = "DT"
                if not runner.state.agents[i].done:
                    runner.set_controller(i, self.dt)


class _DynamicHook(HybridController):
    def __init__(self, dt, advisor, event: GoalChangeEvent, config: ScenarioConfig):
        super().__init__(dt, advisor)
        self.event = event
        self.config = config
        self.realized: GoalChangeEvent | None = None

    def __call__(self, runner: EpisodeRunner) -> None:
        self.revert_expired(runner)
        if runner.t != self.event.t_change:
            return
        ev = self.realized = self.event.realize(runner.state)
        for i, g in zip(ev.agent_ids, ev.new_goals):
            runner.set_goal(i, g)
        runner.record.events.append({"t": runner.t, "kind": "scenario", "event": asdict(ev)})
        if self.config.advise_all_unfinished:
            ids = [a.id for a in runner.state.agents if not a.done]
        else:
            ids = ev.agent_ids
        self.hand_over(runner, ids, runner.t + self.config.window)


def run_dynamic_episode(
    grid: GridMap,
    instance,
    dt: Policy,
    advisor: Policy | None,
    scenario: tuple[GoalChangeEvent, ScenarioConfig],
    config: EpisodeConfig | None = None,
) -> EpisodeRecord:
    """DT for everyone; at t_change some goals move and the affected agents
    are driven by ``advisor`` for ``window`` steps (the DT keeps tracking
    them), then everything is back on the DT."""
    event, sc = scenario
    config = config or EpisodeConfig(horizon=sc.horizon)
    if advisor is None or sc.advisor == "none":
        advisor = None
    hook = _DynamicHook(dt, advisor, event, sc)
    runner = EpisodeRunner(grid, instance, dt, config, hooks=[hook], trackers=[dt])
    rec = runner.run()
    if hook.realized is None:
        rec.events.append({"t": rec.duration, "kind": "scenario_skipped", "reason": "episode ended before t_change"})
    return rec


class _RescueHook(HybridController):
    def __init__(self, dt, advisor, budget: int):
        super().__init__(dt, advisor)
        self.budget = budget

    def __call__(self, runner: EpisodeRunner) -> None:
        if runner.t == self.budget:
            live = [a.id for a in runner.state.agents if not a.done]
            if live:
                runner.record.events.append({"t": runner.t, "kind": "rescue", "agents": live})
            self.hand_over(runner, live, runner.config.horizon)


def run_static_with_rescue(
    grid: GridMap,
    instance,
    dt: Policy,
    advisor: Policy,
    budget: int | None = None,
    config: EpisodeConfig = EpisodeConfig(),
) -> EpisodeRecord:
    """DT for ``budget`` steps; whoever is still out then switches to the
    advisor until done or the horizon."""
    budget = config.horizon // 2 if budget is None else budget
    if not 0 <= budget < config.horizon:
        raise ValueError(f"budget {budget} must be in [0, horizon={config.horizon})")
    hook = _RescueHook(dt, advisor, budget)
    return EpisodeRunner(grid, instance, dt, config, hooks=[hook], trackers=[dt]).run()


def advisor_windows(record: EpisodeRecord, name: str) -> dict[int, list[int]]:
    """Timesteps each agent spent under controller ``name``."""
    return {i: record.controller_steps(i, name) for i in range(record.n_agents) if record.controller_steps(i, name)}


@dataclass
class SweepSpec:
    """One cell of an evaluation grid: map family, agents and a scenario."""

    size: int
    n_agents: int
    density: float
    scenario: ScenarioConfig
    episodes: int = 10
    seed: int = 0

    @classmethod
    def from_json(cls, data: dict) -> "SweepSpec":
        d = dict(data)
        d["scenario"] = ScenarioConfig.from_json(d["scenario"])
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.to_json()
        return d


def episode_instances(spec: SweepSpec):
    """Deterministic (episode, grid, instance) triples for a sweep cell."""
    for k in range(spec.episodes):
        ss = np.random.SeedSequence([spec.seed, spec.size, spec.n_agents, int(round(spec.density * 1000)), k])
        map_seed, inst_seed = (int(x) for x in ss.generate_state(2))
        grid = generate_map(spec.size, spec.size, spec.density, map_seed)
        yield k, grid, sample_instance(grid, spec.n_agents, inst_seed)


def run_sweep(spec: SweepSpec, make_dt, make_advisor) -> list[tuple[dict, EpisodeRecord]]:
    """Run every episode of a sweep cell. ``make_dt(k)`` and ``make_advisor(k)``
    build fresh policies per episode so runs are independent."""
    sc = spec.scenario
    out = []
    for k, grid, inst in episode_instances(spec):
        keys = {
            "size": spec.size,
            "n_agents": spec.n_agents,
            "density": spec.density,
            "mode": sc.mode,
            "advisor": sc.advisor,
            "fraction": sc.fraction if sc.mode == "dynamic" else None,
            "episode": k,
        }
        config = EpisodeConfig(horizon=sc.horizon)
        dt = make_dt(k)
        adv = make_advisor(k) if sc.advisor != "none" else None
        try:
            if sc.mode == "static":
                from .policy import run_episode

                rec = run_episode(grid, inst, dt, config)
            elif sc.mode == "static_rescue":
                rec = run_static_with_rescue(grid, inst, dt, adv, sc.budget, config)
            else:
                event = GoalChangeEvent(sc.t_change, math.ceil(sc.fraction * spec.n_agents - 1e-9), sc.seed + k)
                rec = run_dynamic_episode(grid, inst, dt, adv, (event, sc), config)
        except ScenarioError as exc:
            log.warning("episode %d skipped: %s", k, exc)
            continue
        out.append((keys, rec))
    return out
