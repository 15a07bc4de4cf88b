"""Decentralised execution: policies and the episode loop."""
from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .env import (
    Action,
    Coord,
    EpisodeConfig,
    GridMap,
    WorldState,
    is_terminal,
    observe,
    render,
    reset,
    step,
)
from .planner import JointPlan
from .training import predict_actions

log = logging.getLogger(__name__)


class Policy:
    """Maps agents' observations to actions.

    ``act_many`` is called once per timestep with every agent the policy
    currently controls. ``update`` reports each agent's reward afterwards;
    ``track`` reports actions other controllers took for agents this policy
    follows (so a DT context stays continuous through an advisor window).
    """

    name = "policy"

    def act_many(self, agent_ids: Sequence[int], observations: dict, world: WorldState, t: int) -> dict[int, Action]:
        return {i: self.act(i, observations[i], world, t) for i in agent_ids}

    def act(self, agent_id: int, obs: np.ndarray, world: WorldState, t: int) -> Action:
        raise NotImplementedError

    def update(self, agent_id: int, reward: float) -> None:
        pass

    def track(self, agent_id: int, obs: np.ndarray, action: Action, t: int) -> None:
        pass

    def reset_on_goal_change(self, agent_id: int, new_goal: Coord) -> None:
        pass


@dataclass
class Slot:
    rtg: float
    obs: np.ndarray
    action: int | None
    timestep: int


@dataclass
class AgentContext:
    buffer: deque
    rtg: float
    rewards_since_reset: float = 0.0


class DTPolicy(Policy):
    """Decision Transformer driven per agent from its own observations only."""

    name = "dt"

    def __init__(
        self,
        model,
        target_rtg: float = 20.0,
        rtg_scale: float = 20.0,
        clear_context_on_change: bool = False,
        sample: bool = False,
        seed: int = 0,
        temperature: float = 1.0,
    ):
        self.model = model
        self.K = model.cfg.context_length
        self.target_rtg = target_rtg
        self.rtg_scale = rtg_scale
        self.clear_context_on_change = clear_context_on_change
        self.sample = sample
        self.temperature = temperature
        self.generator = torch.Generator().manual_seed(seed)
        self.contexts: dict[int, AgentContext] = {}

    def context(self, agent_id: int) -> AgentContext:
        ctx = self.contexts.get(agent_id)
        if ctx is None:
            ctx = self.contexts[agent_id] = AgentContext(deque(maxlen=self.K), self.target_rtg)
        return ctx

    def _push(self, agent_id, obs, t, action=None) -> AgentContext:
        ctx = self.context(agent_id)
        ctx.buffer.append(Slot(ctx.rtg, np.asarray(obs), action, int(t)))
        return ctx

    def act_many(self, agent_ids, observations, world=None, t=0):
        if not agent_ids:
            return {}
        ctxs = [self._push(i, observations[i], t) for i in agent_ids]
        acts = predict_actions(
            self.model, [c.buffer for c in ctxs], self.rtg_scale, self.sample, self.generator, self.temperature
        )
        for c, a in zip(ctxs, acts):
            c.buffer[-1].action = int(a)
        return dict(zip(agent_ids, acts))

    def dt_act(self, agent_id: int, obs: np.ndarray, clock: int) -> Action:
        return self.act_many([agent_id], {agent_id: obs}, None, clock)[agent_id]

    def track(self, agent_id, obs, action, t):
        self._push(agent_id, obs, t, int(action))

    def update(self, agent_id, reward):
        ctx = self.context(agent_id)
        ctx.rtg -= reward
        ctx.rewards_since_reset += reward

    def reset_on_goal_change(self, agent_id, new_goal):
        ctx = self.context(agent_id)
        ctx.rtg = self.target_rtg
        ctx.rewards_since_reset = 0.0
        if self.clear_context_on_change:
            ctx.buffer.clear()


class ScriptedPolicy(Policy):
    """Replays fixed per-agent action lists, waiting once they run out."""

    name = "scripted"

    def __init__(self, actions: dict[int, Sequence[int]]):
        self.actions = {i: list(a) for i, a in actions.items()}

    @classmethod
    def from_plan(cls, plan: JointPlan) -> "ScriptedPolicy":
        from .env import action_between

        return cls({i: [action_between(p[t], p[t + 1]) for t in range(len(p) - 1)] for i, p in enumerate(plan.paths)})

    def act(self, agent_id, obs, world, t):
        seq = self.actions.get(agent_id, [])
        return Action(seq[t]) if t < len(seq) else Action.WAIT


class ConstantPolicy(Policy):
    def __init__(self, action: Action = Action.WAIT):
        self.action = Action(action)
        self.name = f"constant_{self.action.name.lower()}"

    def act(self, agent_id, obs, world, t):
        return self.action


@dataclass
class EpisodeRecord:
    n_agents: int
    horizon: int
    starts: list
    goals: list  # initial goals; goal changes are in ``events`` and ``final_goals``
    positions: list  # per agent: [[r, c], ...] for t = 0 .. arrival (or end)
    actions: list  # per agent, per timestep acted
    rewards: list  # per agent, per timestep acted
    controllers: list  # per agent, per timestep acted: controller name
    collisions: list = field(default_factory=list)  # [t, agent, kind]
    arrival_times: list = field(default_factory=list)
    events: list = field(default_factory=list)
    success: bool = False
    duration: int = 0
    wall_time: float = 0.0
    error: dict | None = None
    frames: list | None = None
    final_goals: list | None = None

    def __post_init__(self):
        if self.final_goals is None:
            self.final_goals = [list(g) for g in self.goals]

    @property
    def agent_success(self) -> list[bool]:
        return [a is not None for a in self.arrival_times]

    def controller_steps(self, agent_id: int, name: str) -> list[int]:
        """Timesteps at which ``agent_id`` was driven by controller ``name``."""
        t0 = 0
        return [t0 + k for k, c in enumerate(self.controllers[agent_id]) if c == name]

    def check(self) -> None:
        """Raise ValueError if the record is internally inconsistent."""
        for i in range(self.n_agents):
            n = len(self.actions[i])
            if len(self.rewards[i]) != n or len(self.controllers[i]) != n:
                raise ValueError(f"agent {i}: per-step sequences differ in length")
            if len(self.positions[i]) != n + 1:
                raise ValueError(f"agent {i}: {len(self.positions[i])} positions for {n} actions")
            arr = self.arrival_times[i]
            if arr is not None:
                if arr != n:
                    raise ValueError(f"agent {i}: arrival {arr} but acted {n} steps")
                if arr > self.horizon:
                    raise ValueError(f"agent {i}: arrival after horizon")
                if list(self.positions[i][-1]) != list(self.final_goals[i]):
                    raise ValueError(f"agent {i}: arrived away from its goal")
            elif n != self.duration and self.error is None:
                raise ValueError(f"agent {i}: unfinished but acted {n} of {self.duration} steps")
        if self.success != all(a is not None for a in self.arrival_times):
            raise ValueError("success flag disagrees with arrival times")

    def to_json(self) -> dict:
        d = asdict(self)
        if d["frames"] is None:
            d.pop("frames")
        return d

    @classmethod
    def from_json(cls, data: dict) -> "EpisodeRecord":
        return cls(**data)

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f)


class EpisodeRunner:
    """Mutable episode loop; hooks receive the runner at the start of every
    timestep and may change goals or controllers."""

    def __init__(
        self,
        grid: GridMap,
        instance,
        policies,
        config: EpisodeConfig = EpisodeConfig(),
        hooks: Sequence[Callable] = (),
        trackers: Sequence[Policy] = (),
        frames: bool = False,
    ):
        self.config = config
        self.state = reset(grid, instance)
        n = self.state.n_agents
        if isinstance(policies, Policy):
            policies = [policies] * n
        if len(policies) != n:
            raise ValueError(f"{len(policies)} policies for {n} agents")
        self.controllers: list[Policy] = list(policies)
        self.hooks = list(hooks)
        self.trackers = list(trackers)
        self.record = EpisodeRecord(
            n_agents=n,
            horizon=config.horizon,
            starts=[list(map(int, a.pos)) for a in self.state.agents],
            goals=[list(map(int, a.goal)) for a in self.state.agents],
            positions=[[list(map(int, a.pos))] for a in self.state.agents],
            actions=[[] for _ in range(n)],
            rewards=[[] for _ in range(n)],
            controllers=[[] for _ in range(n)],
            arrival_times=[None] * n,
            frames=[render(self.state)] if frames else None,
        )

    @property
    def t(self) -> int:
        return self.state.t

    def set_goal(self, agent_id: int, goal) -> None:
        a = self.state.agents[agent_id]
        if a.done:
            raise ValueError(f"agent {agent_id} is already done")
        old = a.goal
        a.goal = Coord(*goal)
        self.record.final_goals[agent_id] = list(map(int, goal))
        for p in {id(p): p for p in self.controllers + self.trackers}.values():
            p.reset_on_goal_change(agent_id, a.goal)
        self.record.events.append(
            {"t": self.t, "kind": "goal_change", "agent": agent_id, "old": list(map(int, old)), "new": list(map(int, goal))}
        )

    def set_controller(self, agent_id: int, policy: Policy) -> None:
        old = self.controllers[agent_id]
        if old is policy:
            return
        self.controllers[agent_id] = policy
        self.record.events.append(
            {"t": self.t, "kind": "controller", "agent": agent_id, "old": old.name, "new": policy.name}
        )

    def run(self) -> EpisodeRecord:
        t_start = time.perf_counter()
        rec = self.record
        while not is_terminal(self.state, self.config):
            for hook in self.hooks:
                hook(self)
            if self.state.all_done():
                break
            t = self.t
            active = [a.id for a in self.state.agents if not a.done]
            obs = {i: observe(self.state, i) for i in active}
            groups: dict[int, tuple[Policy, list[int]]] = {}
            for i in active:
                p = self.controllers[i]
                groups.setdefault(id(p), (p, []))[1].append(i)
            actions: dict[int, Action] = {}
            try:
                for p, ids in groups.values():
                    out = p.act_many(ids, {i: obs[i] for i in ids}, self.state, t)
                    for i in ids:
                        actions[i] = Action(int(out[i]))
            except Exception as exc:  # captured into the record
                log.exception("policy failure at t=%d", t)
                rec.error = {"t": t, "policy": p.name, "agents": ids, "message": repr(exc)}
                break
            for tr in self.trackers:
                for i in active:
                    if self.controllers[i] is not tr:
                        tr.track(i, obs[i], actions[i], t)
            joint = [int(actions.get(i, Action.WAIT)) for i in range(self.state.n_agents)]
            self.state, res = step(self.state, joint, self.config)
            for i in active:
                a = self.state.agents[i]
                rec.actions[i].append(int(actions[i]))
                rec.rewards[i].append(float(res.rewards[i]))
                rec.controllers[i].append(self.controllers[i].name)
                rec.positions[i].append(list(map(int, a.pos)))
                if a.done:
                    rec.arrival_times[i] = a.arrival_time
                ctrl = self.controllers[i]
                ctrl.update(i, res.rewards[i])
                for tr in self.trackers:
                    if tr is not ctrl:
                        tr.update(i, res.rewards[i])
            rec.collisions.extend([t, i, kind] for i, kind in res.collisions)
            if rec.frames is not None:
                rec.frames.append(render(self.state))
        rec.duration = self.state.t
        rec.success = all(a is not None for a in rec.arrival_times)
        rec.wall_time = time.perf_counter() - t_start
        return rec


def run_episode(
    grid: GridMap,
    instance,
    policies,
    config: EpisodeConfig = EpisodeConfig(),
    hooks: Sequence[Callable] = (),
    trackers: Sequence[Policy] = (),
    frames: bool = False,
) -> EpisodeRecord:
    """Observe -> act -> step until every agent is done or the horizon is hit."""
    return EpisodeRunner(grid, instance, policies, config, hooks, trackers, frames).run()
