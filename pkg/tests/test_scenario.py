import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtmapf.advisor import AdvisorPolicy
from dtmapf.env import Action, Coord, EpisodeConfig, generate_map, parse_grid, reset, sample_instance
from dtmapf.model import DecisionTransformer, DTConfig
from dtmapf.policy import ConstantPolicy, DTPolicy, run_episode
from dtmapf.scenario import (
    T_CHANGE,
    GoalChangeEvent,
    ScenarioConfig,
    ScenarioError,
    SweepSpec,
    advisor_windows,
    episode_instances,
    make_scenario,
    run_dynamic_episode,
    run_static_with_rescue,
    run_sweep,
)

import oracles

TINY = DTConfig(context_length=50, embed_dim=32, n_layers=1, n_heads=2, conv_channels=(4, 8), dropout=0.0)


@pytest.fixture(scope="module")
def tiny():
    return DecisionTransformer(TINY).eval()


def dt(model, seed=0):
    return DTPolicy(model, sample=True, seed=seed)


def scenario_event(rec):
    (ev,) = [e for e in rec.events if e["kind"] == "scenario"]
    return ev["event"]


def assert_dynamic_discipline(rec, window, advise_all=False):
    """Advisor only inside [t_change, t_change + window), only for affected
    agents, and for every step of that window the agent was still out."""
    ev = scenario_event(rec)
    t0 = ev["t_change"]
    wins = advisor_windows(rec, "advisor")
    if not advise_all:
        assert set(wins) <= set(ev["agent_ids"])
    for i, steps in wins.items():
        assert steps == list(range(t0, t0 + len(steps)))
        assert len(steps) <= window
    for i in ev["agent_ids"] if not advise_all else wins:
        acted = len(rec.actions[i])
        assert len(wins.get(i, [])) == min(window, acted - t0)


@pytest.mark.parametrize("size,n,frac,k,t", [(20, 8, 0.25, 2, 15), (80, 16, 0.5, 8, 50), (40, 32, 0.25, 8, 30), (20, 3, 0.25, 1, 15)])
def test_make_scenario_examples(size, n, frac, k, t):
    ev, cfg = make_scenario(size, n, frac, seed=1)
    assert ev.n_affected == k and ev.t_change == t == T_CHANGE[size] == cfg.t_change
    assert cfg.window == 5 and cfg.mode == "dynamic"


def test_make_scenario_errors():
    with pytest.raises(ValueError):
        make_scenario(20, 2, 0.25, 0, horizon=18)
    with pytest.raises(ValueError):
        make_scenario(30, 8, 0.25, 0)
    with pytest.raises(ValueError):
        make_scenario(20, 0, 0.25, 0)
    with pytest.raises(ValueError):
        ScenarioConfig(mode="weird")
    with pytest.raises(ValueError):
        ScenarioConfig.from_json({"mode": "dynamic", "t_change": 3, "colour": 1})
    cfg = ScenarioConfig(mode="static_rescue", horizon=64)
    assert cfg.budget == 32
    assert ScenarioConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


@given(st.integers(0, 2**31))
@settings(max_examples=25)
def test_goal_change_event_valid_and_deterministic(seed):
    grid = generate_map(20, 20, 0.2, seed)
    inst = sample_instance(grid, 8, seed)
    state = reset(grid, inst)
    ev, _ = make_scenario(20, 8, 0.5, seed)
    a, b = ev.realize(state), ev.realize(state)
    assert a == b and len(a.agent_ids) == 4 == len(set(a.agent_ids))
    old = {tuple(g) for _, g in inst}
    assert len({tuple(g) for g in a.new_goals}) == 4
    for i, g in zip(a.agent_ids, a.new_goals):
        assert tuple(g) not in old and tuple(g) != tuple(inst[i][0])
        assert oracles.bfs_distance(grid.obstacles, inst[i][0], g) is not None


def test_goal_change_no_room():
    grid = parse_grid("..#.\n###.")
    state = reset(grid, [(Coord(0, 0), Coord(0, 1))])
    with pytest.raises(ScenarioError):
        GoalChangeEvent(0, 1, 0).realize(state)


def test_dynamic_window_discipline(tiny):
    grid = generate_map(20, 20, 0.1, 2)
    inst = sample_instance(grid, 8, 2)
    sc = make_scenario(20, 8, 0.25, seed=2, horizon=80)
    rec = run_dynamic_episode(grid, inst, dt(tiny), AdvisorPolicy(), sc)
    rec.check()
    ev = scenario_event(rec)
    assert ev["t_change"] == 15 and len(ev["agent_ids"]) == 2
    assert_dynamic_discipline(rec, 5)
    assert [e["t"] for e in rec.events if e["kind"] == "goal_change"] == [15, 15]
    switches = [(e["t"], e["new"]) for e in rec.events if e["kind"] == "controller"]
    assert sorted(switches) == sorted([(15, "advisor")] * 2 + [(20, "dt")] * 2)
    assert rec.final_goals[ev["agent_ids"][0]] == ev["new_goals"][0]


def test_dynamic_advise_all_unfinished(tiny):
    grid = generate_map(20, 20, 0.0, 3)
    inst = sample_instance(grid, 6, 3)
    sc = make_scenario(20, 6, 0.25, seed=3, horizon=60, advise_all_unfinished=True)
    rec = run_dynamic_episode(grid, inst, dt(tiny), AdvisorPolicy(), sc)
    wins = advisor_windows(rec, "advisor")
    live = [i for i in range(6) if len(rec.actions[i]) > 15]
    assert sorted(wins) == live
    assert_dynamic_discipline(rec, 5, advise_all=True)


def test_window_zero_equals_pure_dt(tiny):
    grid = generate_map(20, 20, 0.1, 4)
    inst = sample_instance(grid, 8, 4)
    base = run_dynamic_episode(grid, inst, dt(tiny), None, make_scenario(20, 8, 0.25, 4, horizon=40, advisor="none"))
    zero = run_dynamic_episode(grid, inst, dt(tiny), AdvisorPolicy(), make_scenario(20, 8, 0.25, 4, window=0, horizon=40))
    assert zero.actions == base.actions and zero.positions == base.positions
    assert not advisor_windows(zero, "advisor")


def test_non_interference(tiny):
    grid = generate_map(20, 20, 0.1, 5)
    inst = sample_instance(grid, 8, 5)
    pure = run_episode(grid, inst, dt(tiny, 7), EpisodeConfig(horizon=40))
    dyn = run_dynamic_episode(grid, inst, dt(tiny, 7), AdvisorPolicy(), make_scenario(20, 8, 0.25, 5, horizon=40))
    for i in range(8):
        assert dyn.actions[i][:15] == pure.actions[i][:15]


def test_oracle_first_step_reduces_distance(tiny):
    checked = 0
    for seed in range(12):
        grid = generate_map(20, 20, 0.1, seed)
        inst = sample_instance(grid, 8, seed)
        rec = run_dynamic_episode(grid, inst, dt(tiny, seed), AdvisorPolicy(), make_scenario(20, 8, 0.25, seed, horizon=40))
        ev = scenario_event(rec)
        t0 = ev["t_change"]
        hit = {(t, i) for t, i, _ in rec.collisions}
        for i, g in zip(ev["agent_ids"], ev["new_goals"]):
            pos = tuple(rec.positions[i][t0])
            others = frozenset(tuple(rec.positions[j][t0]) for j in range(8) if j != i and len(rec.positions[j]) > t0
                               and not (rec.arrival_times[j] is not None and rec.arrival_times[j] <= t0))
            free_d = oracles.bfs_distance(grid.obstacles, pos, g)
            if oracles.bfs_distance(grid.obstacles, pos, g, others) != free_d or (t0, i) in hit:
                continue  # obstructed
            after = tuple(rec.positions[i][t0 + 1])
            assert oracles.bfs_distance(grid.obstacles, after, g) == free_d - 1
            checked += 1
    assert checked >= 15


def test_scenario_skipped_when_episode_ends_early():
    grid = parse_grid("....")
    inst = [(Coord(0, 0), Coord(0, 1))]
    rec = run_dynamic_episode(grid, inst, ConstantPolicy(Action.EAST), AdvisorPolicy(), make_scenario(20, 1, 1.0, 0, horizon=40))
    assert rec.success and rec.events[-1]["kind"] == "scenario_skipped"


def test_rescue_not_needed(tiny):
    grid = parse_grid("....")
    inst = [(Coord(0, 0), Coord(0, 2))]
    rec = run_static_with_rescue(grid, inst, ConstantPolicy(Action.EAST), AdvisorPolicy(), budget=5, config=EpisodeConfig(horizon=10))
    assert rec.success and not advisor_windows(rec, "advisor")
    assert not [e for e in rec.events if e["kind"] == "rescue"]


def test_rescue_stuck_agent_reaches_goal():
    grid = parse_grid("\n".join(["........"] * 8))
    inst = [(Coord(0, 0), Coord(7, 7)), (Coord(3, 3), Coord(3, 4))]
    rec = run_static_with_rescue(grid, inst, ConstantPolicy(Action.EAST), AdvisorPolicy(), budget=10, config=EpisodeConfig(horizon=40))
    rec.check()
    assert rec.success
    wins = advisor_windows(rec, "advisor")
    # agent 1 was done after one step; only agent 0 is rescued, from the budget on
    assert list(wins) == [0] and wins[0][0] == 10 and wins[0] == list(range(10, rec.arrival_times[0]))
    assert rec.controllers[1] == ["constant_east"]


def test_rescue_budget_zero_is_pure_advisor():
    grid = parse_grid("\n".join(["......"] * 6))
    inst = [(Coord(0, 0), Coord(5, 5)), (Coord(5, 0), Coord(0, 5))]
    rec = run_static_with_rescue(grid, inst, ConstantPolicy(), AdvisorPolicy(), budget=0, config=EpisodeConfig(horizon=30))
    assert rec.success
    assert all(set(c) == {"advisor"} for c in rec.controllers)
    with pytest.raises(ValueError):
        run_static_with_rescue(grid, inst, ConstantPolicy(), AdvisorPolicy(), budget=30, config=EpisodeConfig(horizon=30))


def test_sweep_deterministic(tiny):
    spec = SweepSpec(20, 4, 0.1, ScenarioConfig("dynamic", 15, 0.25, horizon=30, seed=2), episodes=3, seed=1)
    assert SweepSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    a = [(k, r.actions) for k, r in run_sweep(spec, lambda k: dt(tiny, k), lambda k: AdvisorPolicy())]
    b = [(k, r.actions) for k, r in run_sweep(spec, lambda k: dt(tiny, k), lambda k: AdvisorPolicy())]
    assert a == b and len(a) == 3
    assert a[0][0] == {"size": 20, "n_agents": 4, "density": 0.1, "mode": "dynamic", "advisor": "oracle", "fraction": 0.25, "episode": 0}
    firsts = [inst for _, _, inst in episode_instances(spec)]
    assert firsts[0] != firsts[1]
