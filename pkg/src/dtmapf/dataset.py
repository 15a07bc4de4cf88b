"""Expert trajectories -> (return-to-go, observation, action) chunks, and the
binary dataset container.

Container layout (all little-endian):

    header   16 bytes   b"DTMAPFDS" magic, u32 version, u32 reserved (0)
    meta     u64 length + UTF-8 JSON (sorted keys)
    records  u32 length + record, repeated until EOF

    record   u64 episode id, u32 agent id, u32 chunk index, u8 real length,
             K slots of (f32 rtg, u8 action, u16 timestep, 50 bytes packed obs),
             ceil(K/8) bytes packed mask
"""
from __future__ import annotations

import io
import itertools
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .env import (
    Coord,
    EpisodeConfig,
    GridMap,
    RewardConfig,
    action_between,
    generate_map,
    observe,
    reset,
    sample_instance,
    step,
    InstanceSamplingError,
)
from .planner import JointPlan, PlanningFailure, plan_with_fallback

log = logging.getLogger(__name__)

CONTEXT_LENGTH = 50
OBS_SHAPE = (4, 10, 10)
MAGIC = b"DTMAPFDS"
VERSION = 1

_HEADER = struct.Struct("<8sII")
_RECORD_HEAD = struct.Struct("<QIIB")
_SLOT = struct.Struct("<fBH50s")


class ReplayError(RuntimeError):
    """Expert plan collided when replayed through the environment."""


@dataclass
class Transition:
    rtg: float
    obs: np.ndarray
    action: int
    timestep: int
    reward: float


@dataclass
class TrajectoryChunk:
    episode_id: int
    agent_id: int
    chunk_index: int
    rtg: np.ndarray  # (K,) float32
    obs: np.ndarray  # (K, 4, 10, 10) uint8
    actions: np.ndarray  # (K,) uint8
    timesteps: np.ndarray  # (K,) uint16
    mask: np.ndarray  # (K,) bool

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, TrajectoryChunk):
            return NotImplemented
        return (
            (self.episode_id, self.agent_id, self.chunk_index)
            == (other.episode_id, other.agent_id, other.chunk_index)
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in (
                    (self.rtg, other.rtg),
                    (self.obs, other.obs),
                    (self.actions, other.actions),
                    (self.timesteps, other.timesteps),
                    (self.mask, other.mask),
                )
            )
        )


@dataclass
class CorpusSpec:
    agent_counts: tuple = (4, 16, 32, 64)
    grid_sizes: tuple = (10, 20, 40, 80)
    densities: tuple = (0.0, 0.1, 0.2)
    envs_per_combo: int = 80
    seed: int = 0
    horizon: int = 256
    context_length: int = CONTEXT_LENGTH
    node_budget: int = 100_000
    cbs_time_limit: float | None = None
    episode_bonus: bool = False

    def combinations(self) -> list[tuple[int, int, float]]:
        return list(itertools.product(self.grid_sizes, self.agent_counts, self.densities))

    def environments(self) -> list[tuple[int, int, float, int]]:
        """(size, n_agents, density, env index) for every environment, in order."""
        return [(s, n, d, e) for s, n, d in self.combinations() for e in range(self.envs_per_combo)]

    @classmethod
    def from_json(cls, data: dict) -> "CorpusSpec":
        data = dict(data)
        for key in ("agent_counts", "grid_sizes", "densities"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class DatasetMeta:
    spec: dict
    episodes: int = 0
    chunks: int = 0
    transitions: int = 0
    skipped: list = field(default_factory=list)
    planners: dict = field(default_factory=dict)
    per_combination: dict = field(default_factory=dict)
    degenerate: int = 0


def compute_rtg(rewards: Sequence[float]) -> list[float]:
    """Undiscounted suffix sums: rtg[t] = sum(rewards[t:])."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc += rewards[t]
        out[t] = acc
    return out


def rollout_expert(
    grid: GridMap,
    instance,
    plan: JointPlan,
    rewards: RewardConfig = RewardConfig(),
    horizon: int | None = None,
) -> list[list[Transition]]:
    """Replay ``plan`` through the environment and record per-agent transitions.

    Each agent's observation is taken before acting; the action is read off
    consecutive plan cells. Returns one transition list per agent, with
    returns-to-go filled in. A zero-length path gives an empty trajectory.
    """
    horizon = horizon if horizon is not None else max(plan.makespan, 1)
    config = EpisodeConfig(horizon=max(horizon, plan.makespan, 1), rewards=rewards)
    state = reset(grid, instance)
    trajs: list[list[Transition]] = [[] for _ in instance]
    for t in range(plan.makespan):
        actions = [0] * len(instance)
        for a in state.agents:
            if a.done:
                continue
            p = plan.paths[a.id]
            if len(p) == 1:
                # spawned on its goal: waits once to finish, nothing recorded
                continue
            if p[t] != a.pos:
                raise ReplayError(f"agent {a.id} at {tuple(a.pos)} but plan says {tuple(p[t])} at t={t}")
            actions[a.id] = int(action_between(p[t], p[t + 1]))
            trajs[a.id].append(Transition(0.0, observe(state, a.id), actions[a.id], t, 0.0))
        active = [a.id for a in state.agents if not a.done]
        state, result = step(state, actions, config)
        if result.collisions:
            raise ReplayError(f"collision replaying expert plan at t={t}: {result.collisions}")
        for i in active:
            if trajs[i] and trajs[i][-1].timestep == t:
                trajs[i][-1].reward = result.rewards[i]
        if rewards.episode_bonus_enabled and result.all_done:
            # agents that finished earlier get the team bonus on their last step
            for i, tr in enumerate(trajs):
                if i not in active and tr:
                    tr[-1].reward += result.rewards[i]
    for tr in trajs:
        for x, g in zip(tr, compute_rtg([x.reward for x in tr])):
            x.rtg = g
    return trajs


def chunk(
    trajectory: Sequence[Transition],
    K: int = CONTEXT_LENGTH,
    episode_id: int = 0,
    agent_id: int = 0,
    stride: int | None = None,
) -> list[TrajectoryChunk]:
    """Split into windows of K slots; the last window is zero-padded."""
    if K < 1:
        raise ValueError("K must be >= 1")
    stride = stride or K
    out = []
    n = len(trajectory)
    starts = range(0, n, stride) if n else []
    for ci, s in enumerate(starts):
        part = trajectory[s : s + K]
        m = len(part)
        c = TrajectoryChunk(
            episode_id,
            agent_id,
            ci,
            np.zeros(K, np.float32),
            np.zeros((K,) + OBS_SHAPE, np.uint8),
            np.zeros(K, np.uint8),
            np.zeros(K, np.uint16),
            np.zeros(K, bool),
        )
        c.rtg[:m] = [x.rtg for x in part]
        c.obs[:m] = [x.obs for x in part]
        c.actions[:m] = [x.action for x in part]
        c.timesteps[:m] = [x.timestep for x in part]
        c.mask[:m] = True
        out.append(c)
        if s + K >= n:
            break
    return out


def unchunk(chunks: Sequence[TrajectoryChunk]) -> dict[str, np.ndarray]:
    """Concatenate the real (unpadded) slots of consecutive chunks."""
    keys = ("rtg", "obs", "actions", "timesteps")
    if not chunks:
        return {k: np.zeros((0,)) for k in keys}
    return {k: np.concatenate([getattr(c, k)[c.mask] for c in chunks]) for k in keys}


# --- binary container --------------------------------------------------------

def encode_chunk(c: TrajectoryChunk) -> bytes:
    K = len(c.mask)
    buf = io.BytesIO()
    buf.write(_RECORD_HEAD.pack(c.episode_id, c.agent_id, c.chunk_index, c.length))
    packed = np.packbits(c.obs.reshape(K, -1), axis=1)
    for k in range(K):
        buf.write(_SLOT.pack(float(c.rtg[k]), int(c.actions[k]), int(c.timesteps[k]), packed[k].tobytes()))
    buf.write(np.packbits(c.mask).tobytes())
    return buf.getvalue()


def decode_chunk(data: bytes, K: int = CONTEXT_LENGTH) -> TrajectoryChunk:
    ep, ag, ci, length = _RECORD_HEAD.unpack_from(data, 0)
    off = _RECORD_HEAD.size
    rtg = np.zeros(K, np.float32)
    actions = np.zeros(K, np.uint8)
    timesteps = np.zeros(K, np.uint16)
    packed = np.zeros((K, 50), np.uint8)
    for k in range(K):
        r, a, t, ob = _SLOT.unpack_from(data, off)
        off += _SLOT.size
        rtg[k], actions[k], timesteps[k] = r, a, t
        packed[k] = np.frombuffer(ob, np.uint8)
    mask = np.unpackbits(np.frombuffer(data, np.uint8, math.ceil(K / 8), off))[:K].astype(bool)
    if int(mask.sum()) != length:
        raise ValueError("record mask disagrees with stored length")
    obs = np.unpackbits(packed, axis=1)[:, :400].reshape((K,) + OBS_SHAPE)
    return TrajectoryChunk(ep, ag, ci, rtg, obs, actions, timesteps, mask)


class DatasetWriter:
    def __init__(self, path, meta: dict):
        self._f = open(path, "wb")
        self._f.write(_HEADER.pack(MAGIC, VERSION, 0))
        blob = json.dumps(meta, sort_keys=True).encode()
        self._f.write(struct.pack("<Q", len(blob)))
        self._f.write(blob)

    def write(self, c: TrajectoryChunk) -> None:
        rec = encode_chunk(c)
        self._f.write(struct.pack("<I", len(rec)))
        self._f.write(rec)

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_dataset(path, chunks: Iterable[TrajectoryChunk], meta: dict | None = None) -> None:
    with DatasetWriter(path, meta or {}) as w:
        for c in chunks:
            w.write(c)


def read_dataset(path) -> tuple[dict, list[TrajectoryChunk]]:
    with open(path, "rb") as f:
        data = f.read()
    magic, version, _ = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    meta = json.loads(data[off : off + n])
    off += n
    K = meta.get("context_length", CONTEXT_LENGTH)
    chunks = []
    while off < len(data):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        chunks.append(decode_chunk(data[off : off + n], K))
        off += n
    return meta, chunks


# --- corpus ------------------------------------------------------------------

def _episode(spec: CorpusSpec, env_index: int, size: int, n_agents: int, density: float, e: int):
    ss = np.random.SeedSequence([spec.seed, env_index])
    map_seed, inst_seed, plan_seed = (int(s) for s in ss.generate_state(3))
    grid = generate_map(size, size, density, map_seed)
    instance = sample_instance(grid, n_agents, inst_seed)
    plan, planner = plan_with_fallback(
        grid, instance, spec.horizon, spec.node_budget, seed=plan_seed, time_limit=spec.cbs_time_limit
    )
    rewards = RewardConfig(episode_bonus_enabled=spec.episode_bonus)
    return grid, instance, plan, planner, rollout_expert(grid, instance, plan, rewards, spec.horizon)


def build_corpus(spec: CorpusSpec, out_path, progress: bool = False) -> DatasetMeta:
    """Generate, plan, roll out and chunk every environment of ``spec``.

    Output is deterministic for a fixed spec. Instances that cannot be
    sampled or planned are skipped and counted in the metadata.
    """
    meta = DatasetMeta(spec=asdict(spec))
    chunks: list[TrajectoryChunk] = []
    for env_index, (size, n, d, e) in enumerate(spec.environments()):
        key = f"{size}x{size}/{n}/{d}"
        row = meta.per_combination.setdefault(key, {"episodes": 0, "skipped": 0, "chunks": 0})
        try:
            grid, instance, plan, planner, trajs = _episode(spec, env_index, size, n, d, e)
        except (PlanningFailure, InstanceSamplingError) as exc:
            log.warning("skipping env %d (%s): %s", env_index, key, exc)
            meta.skipped.append({"env": env_index, "combination": key, "reason": str(exc)})
            row["skipped"] += 1
            continue
        meta.planners[planner] = meta.planners.get(planner, 0) + 1
        meta.episodes += 1
        row["episodes"] += 1
        for agent_id, tr in enumerate(trajs):
            if not tr:
                meta.degenerate += 1
                continue
            meta.transitions += len(tr)
            cs = chunk(tr, spec.context_length, env_index, agent_id)
            chunks.extend(cs)
            row["chunks"] += len(cs)
        if progress and env_index % 50 == 0:
            log.info("env %d/%d", env_index, len(spec.environments()))
    meta.chunks = len(chunks)
    header = asdict(meta)
    header["context_length"] = spec.context_length
    write_dataset(out_path, chunks, header)
    return meta
