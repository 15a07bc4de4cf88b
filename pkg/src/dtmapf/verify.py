"""Self-checks run by ``dtmapf verify``: planner optimality against a joint
BFS, plan safety under replay, the return/chunk pipeline and the model's
gradients and causal mask."""
from __future__ import annotations

import heapq
import itertools
import logging
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import chunk, compute_rtg, read_dataset, rollout_expert, write_dataset
from .env import DELTAS, GridMap, RewardConfig, generate_map, sample_instance
from .model import DecisionTransformer, DTConfig, TokenBatch, masked_loss
from .planner import plan_cbs, plan_with_fallback, validate_plan
from .training import gradcheck, perturb_parameters

log = logging.getLogger(__name__)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def joint_bfs_soc(grid: GridMap, instance) -> int | None:
    """Optimal sum-of-costs for two agents by uniform-cost search over joint
    states, agents vacating their goal on arrival."""
    (s0, g0), (s1, g1) = [(tuple(s), tuple(g)) for s, g in instance]
    moves = list(DELTAS.values())

    def succ(p):
        for dr, dc in moves:
            q = (p[0] + dr, p[1] + dc)
            if grid.is_free(q):
                yield q

    start = (s0 if s0 != g0 else None, s1 if s1 != g1 else None)
    best = {start: 0}
    tie = itertools.count()
    heap = [(0, next(tie), start)]
    while heap:
        c, _, (p0, p1) = heapq.heappop(heap)
        if c > best[(p0, p1)]:
            continue
        if p0 is None and p1 is None:
            return c
        opts0 = [None] if p0 is None else list(succ(p0))
        opts1 = [None] if p1 is None else list(succ(p1))
        for q0, q1 in itertools.product(opts0, opts1):
            if q0 is not None and q0 == q1:
                continue
            if q0 is not None and q1 is not None and q0 == p1 and q1 == p0:
                continue
            n0 = None if q0 == g0 else q0
            n1 = None if q1 == g1 else q1
            nc = c + (p0 is not None) + (p1 is not None)
            if nc < best.get((n0, n1), math.inf):
                best[(n0, n1)] = nc
                heapq.heappush(heap, (nc, next(tie), (n0, n1)))
    return None


def check_cbs(n: int = 50, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for k in range(n):
        grid = generate_map(4, 4, int(rng.integers(0, 4)) / 16, int(rng.integers(1 << 30)))
        inst = sample_instance(grid, 2, int(rng.integers(1 << 30)))
        ref = joint_bfs_soc(grid, inst)
        got = plan_cbs(grid, inst).soc
        bad += got != ref
    return Check("cbs_optimal", bad == 0, f"{n - bad}/{n} instances match joint BFS")


def check_safety(n: int = 20, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for k in range(n):
        size, agents, dens = [(10, 4, 0.1), (10, 8, 0.2), (20, 8, 0.1)][k % 3]
        grid = generate_map(size, size, dens, int(rng.integers(1 << 30)))
        inst = sample_instance(grid, agents, int(rng.integers(1 << 30)))
        plan, _ = plan_with_fallback(grid, inst, time_limit=5.0)
        trajs = rollout_expert(grid, inst, plan, RewardConfig())
        bad += bool(validate_plan(grid, plan)) or any(t.reward <= -5 for tr in trajs for t in tr)
    return Check("plan_safety", bad == 0, f"{n - bad}/{n} plans conflict-free under replay")


def check_pipeline(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    rewards = rng.choice([-0.3, -0.5, 0.0, -5.0], size=120).tolist() + [20.0]
    rtg = compute_rtg(rewards)
    err = max(abs(rtg[i] - sum(rewards[i:])) for i in range(len(rewards)))
    grid = generate_map(10, 10, 0.1, seed)
    inst = sample_instance(grid, 4, seed)
    plan, _ = plan_with_fallback(grid, inst)
    trajs = rollout_expert(grid, inst, plan, RewardConfig())
    chunks = [c for i, tr in enumerate(trajs) for c in chunk(tr, 50, 0, i)]
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "ds.bin"
        write_dataset(path, chunks, {"seed": seed})
        _, back = read_dataset(path)
    same = len(back) == len(chunks) and all(a == b for a, b in zip(chunks, back))
    ok = err <= 1e-12 and same
    return Check("rtg_chunk_pipeline", ok, f"rtg max err {err:.1e}, round trip {'exact' if same else 'MISMATCH'}")


def _tiny_batch(K: int, B: int = 2, seed: int = 0, binary: bool = True) -> TokenBatch:
    g = torch.Generator().manual_seed(seed)
    mask = torch.ones(B, K, dtype=torch.bool)
    mask[1, K - 2 :] = False
    obs = torch.randint(0, 2, (B, K, 4, 10, 10), generator=g).float() if binary else torch.rand(B, K, 4, 10, 10, generator=g)
    return TokenBatch(
        torch.randn(B, K, generator=g),
        obs,
        torch.randint(0, 5, (B, K), generator=g),
        torch.randint(0, 64, (B, K), generator=g),
        mask,
    ).zero_padding()


def check_model(seed: int = 0, n_coords: int = 200) -> list[Check]:
    cfg = DTConfig(context_length=4, seed=seed)
    # generic point: jittered weights and continuous inputs keep ReLU/max-pool kinks off the stencil
    model = perturb_parameters(DecisionTransformer(cfg).double().eval(), seed=seed)
    batch = _tiny_batch(4, seed=seed, binary=False).to(torch.float64)
    errs = gradcheck(model, batch, n_coords=n_coords, seed=seed)
    worst = max(errs.values())
    out = [Check("gradcheck", worst <= 1e-4, f"max relative error {worst:.2e} over {len(errs)} tensors")]
    with torch.no_grad():
        base = model(batch)
        pert = batch.rows(slice(None))
        pert = TokenBatch(pert.rtg.clone(), pert.obs.clone(), pert.actions.clone(), pert.timesteps.clone(), pert.mask)
        pert.rtg[:, 2:] += 3.0
        pert.obs[:, 2:] = 1 - pert.obs[:, 2:]
        pert.actions[:, 1:] = (pert.actions[:, 1:] + 1) % 5
        diff = (model(pert)[:, :2] - base[:, :2]).abs().max().item()
    out.append(Check("causal_mask", diff <= 1e-6, f"max change in earlier logits {diff:.1e}"))
    m32 = DecisionTransformer(DTConfig(seed=seed)).eval()
    with torch.no_grad():
        loss, _, _ = masked_loss(m32(_tiny_batch(50, B=8, seed=seed)), *_targets(seed))
    out.append(Check("init_loss", abs(loss.item() - math.log(5)) <= 0.15, f"{loss.item():.4f} vs ln 5 = {math.log(5):.4f}"))
    return out


def _targets(seed):
    b = _tiny_batch(50, B=8, seed=seed)
    return b.actions, b.mask


def run_all(quick: bool = False) -> list[Check]:
    checks = [check_cbs(20 if quick else 200), check_safety(6 if quick else 20), check_pipeline()]
    checks += check_model(n_coords=20 if quick else 200)
    for c in checks:
        log.info("%s %s: %s", "PASS" if c.ok else "FAIL", c.name, c.detail)
    return checks
