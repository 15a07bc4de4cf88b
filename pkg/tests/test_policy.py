import math

import numpy as np
import pytest

from dtmapf.env import Action, Coord, EpisodeConfig, GridMap, generate_map, observe, parse_grid, reset, sample_instance
from dtmapf.model import DecisionTransformer, DTConfig
from dtmapf.planner import plan_cbs
from dtmapf.policy import ConstantPolicy, DTPolicy, EpisodeRecord, EpisodeRunner, Policy, ScriptedPolicy, run_episode

SMALL = DTConfig(context_length=50, embed_dim=32, n_layers=1, n_heads=2, conv_channels=(4, 8), dropout=0.0)


@pytest.fixture(scope="module")
def model():
    return DecisionTransformer(SMALL).eval()


def strip(rec):
    d = rec.to_json()
    d.pop("wall_time")
    return d


def test_rtg_bookkeeping(model):
    pol = DTPolicy(model, target_rtg=20.0)
    obs = np.zeros((4, 10, 10), np.uint8)
    pol.dt_act(0, obs, 0)
    assert pol.context(0).buffer[0].rtg == 20.0
    pol.update(0, -0.3)
    pol.dt_act(0, obs, 1)
    assert pol.context(0).buffer[1].rtg == pytest.approx(20.3)
    assert pol.context(0).buffer[0].action is not None


def test_window_keeps_last_k(model):
    pol = DTPolicy(model)
    obs = np.zeros((4, 10, 10), np.uint8)
    for t in range(60):
        pol.dt_act(0, obs, t)
        pol.update(0, -0.5)
    buf = pol.context(0).buffer
    # step 60 (1-based) sees steps 11..60
    assert len(buf) == 50 and buf[0].timestep == 10 and buf[-1].timestep == 59


def test_rtg_telescoping_through_episode(model):
    grid = generate_map(10, 10, 0.1, 3)
    inst = sample_instance(grid, 3, 3)
    pol = DTPolicy(model, target_rtg=20.0)
    rec = run_episode(grid, inst, pol, EpisodeConfig(horizon=30))
    for i in range(3):
        ctx = pol.context(i)
        assert ctx.rtg == pytest.approx(20.0 - math.fsum(rec.rewards[i]), abs=1e-9)
        rtgs = [s.rtg for s in ctx.buffer]
        for k in range(1, len(rtgs)):
            assert rtgs[k] == pytest.approx(rtgs[k - 1] - rec.rewards[i][k - 1], abs=1e-9)


def test_scripted_cbs_replay():
    grid = generate_map(10, 10, 0.2, 8)
    inst = sample_instance(grid, 6, 8)
    plan = plan_cbs(grid, inst)
    rec = run_episode(grid, inst, ScriptedPolicy.from_plan(plan), EpisodeConfig(horizon=64))
    rec.check()
    assert rec.success and not rec.collisions
    assert max(rec.arrival_times) == plan.makespan
    assert sum(rec.arrival_times) == plan.soc
    assert rec.controller_steps(0, "scripted") == list(range(len(plan.paths[0]) - 1))


def test_all_wait_fails():
    grid = generate_map(8, 8, 0.0, 1)
    inst = sample_instance(grid, 3, 1)
    rec = run_episode(grid, inst, ConstantPolicy(), EpisodeConfig(horizon=10))
    rec.check()
    assert not rec.success and rec.duration == 10
    assert all(len(a) == 10 for a in rec.actions)
    assert all(r == -0.5 for rs in rec.rewards for r in rs)


def test_deterministic_records(model):
    grid = generate_map(10, 10, 0.1, 4)
    inst = sample_instance(grid, 4, 4)
    runs = [strip(run_episode(grid, inst, DTPolicy(model, sample=True, seed=9), EpisodeConfig(horizon=20))) for _ in range(2)]
    assert runs[0] == runs[1]


def test_record_json_roundtrip(tmp_path, model):
    grid = generate_map(10, 10, 0.1, 4)
    inst = sample_instance(grid, 2, 4)
    rec = run_episode(grid, inst, DTPolicy(model), EpisodeConfig(horizon=12), frames=True)
    rec.dump(tmp_path / "r.json")
    import json

    back = EpisodeRecord.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back == rec
    assert len(rec.frames) == rec.duration + 1


def test_decentralized(model):
    # identical inside agent 0's window, different far outside it
    base = np.zeros((20, 20), bool)
    far = base.copy()
    far[17:20, 15:20] = True
    inst = [(Coord(2, 2), Coord(4, 6)), (Coord(18, 2), Coord(12, 3))]
    obs_a = observe(reset(GridMap(base), inst), 0)
    obs_b = observe(reset(GridMap(far), inst), 0)
    assert np.array_equal(obs_a, obs_b)
    acts = []
    for grid in (GridMap(base), GridMap(far)):
        pol = DTPolicy(model)
        rec = run_episode(grid, inst, pol, EpisodeConfig(horizon=1))
        acts.append(rec.actions[0])
    assert acts[0] == acts[1]


class Recorder(Policy):
    name = "recorder"

    def __init__(self):
        self.seen = []

    def act(self, agent_id, obs, world, t):
        self.seen.append((t, obs.copy()))
        return Action.WAIT


def test_goal_change_reaches_observation_and_context(model):
    grid = parse_grid("\n".join(["......"] * 6))
    inst = [(Coord(0, 0), Coord(5, 5))]
    rec_pol = Recorder()
    dt = DTPolicy(model, target_rtg=20.0)

    def hook(runner):
        if runner.t == 3:
            runner.set_goal(0, Coord(0, 2))

    rec = run_episode(grid, inst, [rec_pol], EpisodeConfig(horizon=6), hooks=[hook], trackers=[dt])
    # goal channel: agent at local (5,5); (0,2) is two columns east, (5,5) five rows and columns away
    for t, obs in rec_pol.seen:
        if t >= 3:
            assert obs[1, 5, 7] == 1
        else:
            assert obs[1, 9, 9] == 1  # (5,5) is clamped into the window corner
    assert rec.final_goals == [[0, 2]]
    assert [e["kind"] for e in rec.events] == ["goal_change"]
    # the tracker kept all six slots; rtg restarted from the target at t=3
    ctx = dt.context(0)
    assert len(ctx.buffer) == 6
    assert ctx.buffer[3].rtg == 20.0
    assert ctx.rtg == pytest.approx(20.0 + 0.5 * 3)


def test_clear_context_flag(model):
    pol = DTPolicy(model, clear_context_on_change=True)
    obs = np.zeros((4, 10, 10), np.uint8)
    pol.dt_act(0, obs, 0)
    pol.update(0, -0.3)
    before = pol.context(0).rtg
    pol.reset_on_goal_change(0, Coord(1, 1))
    assert len(pol.context(0).buffer) == 0 and pol.context(0).rtg == 20.0 != before


def test_goal_change_onto_own_cell():
    grid = parse_grid("....")
    inst = [(Coord(0, 0), Coord(0, 3))]

    def hook(runner):
        if runner.t == 1:
            runner.set_goal(0, runner.state.agents[0].pos)

    rec = run_episode(grid, inst, ScriptedPolicy({0: [Action.EAST, Action.WAIT]}), EpisodeConfig(horizon=8), hooks=[hook])
    rec.check()
    assert rec.success and rec.arrival_times == [2] and rec.rewards[0] == [-0.3, 0.0]


class Boom(Policy):
    name = "boom"

    def act(self, agent_id, obs, world, t):
        if t == 2:
            raise RuntimeError("bad")
        return Action.WAIT


def test_policy_exception_captured():
    grid = generate_map(6, 6, 0.0, 0)
    inst = sample_instance(grid, 2, 0)
    rec = run_episode(grid, inst, Boom(), EpisodeConfig(horizon=10))
    assert rec.error["t"] == 2 and "bad" in rec.error["message"]
    assert rec.duration == 2 and not rec.success
    rec.check()
