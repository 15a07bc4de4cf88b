import dataclasses
import math

import numpy as np
import pytest
import torch

from dtmapf.dataset import Transition, rollout_expert
from dtmapf.env import generate_map, sample_instance
from dtmapf.model import DecisionTransformer, DTConfig, TokenBatch, masked_loss
from dtmapf.planner import plan_cbs
from dtmapf.training import (
    CheckpointError,
    ShapeMismatchError,
    TrainConfig,
    TrainState,
    evaluate_accuracy,
    gradcheck,
    load_checkpoint,
    perturb_parameters,
    predict_action,
    save_checkpoint,
    train,
    train_step,
)
from dtmapf.verify import _tiny_batch

SMALL = DTConfig(context_length=50, embed_dim=32, n_layers=2, n_heads=2, conv_channels=(4, 8), dropout=0.1)


def test_init_loss_ln5(expert_chunks):
    model = DecisionTransformer(DTConfig()).eval()
    batch = TokenBatch.from_chunks(expert_chunks[:16], 20.0)
    with torch.no_grad():
        loss, _, _ = masked_loss(model(batch), batch.actions, batch.mask)
    assert abs(loss.item() - math.log(5)) <= 0.15


def test_single_batch_loss_strictly_decreases(expert_chunks):
    # dropout off: a stochastic objective can't decrease strictly step by step
    state = TrainState.create(DTConfig(dropout=0.0), TrainConfig(lr=1e-4))
    rng = np.random.default_rng(0)
    batch = TokenBatch.from_chunks([expert_chunks[i] for i in rng.integers(len(expert_chunks), size=8)], 20.0)
    losses = []
    for _ in range(21):
        state, loss, _ = train_step(state, batch)
        losses.append(loss)
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_all_padding_batch_is_noop():
    state = TrainState.create(SMALL, TrainConfig())
    before = [p.detach().clone() for p in state.model.parameters()]
    batch = _tiny_batch(8)
    batch = TokenBatch(batch.rtg * 0, batch.obs * 0, batch.actions * 0, batch.timesteps * 0, batch.mask & False)
    state, loss, acc = train_step(state, batch)
    assert loss == 0.0 and state.step == 0
    assert all(torch.equal(a, b) for a, b in zip(before, state.model.parameters()))


def test_gradcheck_every_tensor():
    model = perturb_parameters(DecisionTransformer(dataclasses.replace(SMALL, context_length=4)), seed=1)
    batch = _tiny_batch(4, seed=1, binary=False)
    stats = {}
    errs = gradcheck(model, batch, n_coords=200, seed=1, stats=stats)
    assert set(errs) == {n for n, _ in model.named_parameters()}
    assert max(errs.values()) <= 1e-4, max(errs.items(), key=lambda kv: kv[1])
    # every tensor got its full sample (or all of its coordinates if smaller)
    sizes = dict((n, p.numel()) for n, p in model.named_parameters())
    for name, s in stats.items():
        if name not in ("action_embed.weight", "timestep_embed.weight"):
            assert s["checked"] == min(200, sizes[name] - s["skipped"])


def test_gradcheck_detects_wrong_gradient():
    model = perturb_parameters(DecisionTransformer(dataclasses.replace(SMALL, context_length=4)), seed=2)
    batch = _tiny_batch(4, seed=2, binary=False)
    orig = torch.nn.Linear.forward

    def scaled(self, x):
        # identical values, doubled gradient through the action head
        y = orig(self, x)
        return y + (y - y.detach()) if self is model.action_head else y

    torch.nn.Linear.forward = scaled
    try:
        errs = gradcheck(model, batch, names=["action_head.weight"], n_coords=20)
    finally:
        torch.nn.Linear.forward = orig
    assert errs["action_head.weight"] > 0.1


def test_checkpoint_roundtrip_bytes(tmp_path, expert_chunks):
    state = train(expert_chunks, SMALL, TrainConfig(steps=3, batch_size=4))
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(state, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(a, DTConfig())
    raw = bytearray(a.read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_resume_matches_uninterrupted(tmp_path, expert_chunks):
    cfg = TrainConfig(steps=12, batch_size=4, seed=3)
    full = train(expert_chunks, SMALL, cfg)
    half = train(expert_chunks, SMALL, dataclasses.replace(cfg, steps=6), out_dir=tmp_path)
    resumed = train(expert_chunks, SMALL, cfg, state=load_checkpoint(tmp_path / "model.ckpt"))
    assert resumed.step == full.step == 12
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,accuracy,grad_norm" and len(lines) == 7


def one_trajectory():
    grid = generate_map(10, 10, 0.0, 5)
    inst = sample_instance(grid, 2, 5)
    trajs = rollout_expert(grid, inst, plan_cbs(grid, inst))
    return max(trajs, key=len)


def test_overfit_reproduces_trajectory():
    from dtmapf.dataset import chunk

    tr = one_trajectory()
    cfg = DTConfig(context_length=16, embed_dim=64, n_layers=2, n_heads=2, conv_channels=(8, 16), dropout=0.0)
    chunks = chunk(tr, 16)
    state = train(chunks, cfg, TrainConfig(steps=300, batch_size=4, lr=1e-3), stop_at_accuracy=1.0)
    assert evaluate_accuracy(state.model, chunks, 20.0) == 1.0
    for t in range(len(tr)):
        start = (t // 16) * 16
        assert predict_action(state.model, tr[start : t + 1]) == tr[t].action


def test_predict_action_contract():
    model = DecisionTransformer(dataclasses.replace(SMALL, context_length=8)).eval()
    rng = np.random.default_rng(0)
    hist = [Transition(20.0 - 0.3 * t, (rng.random((4, 10, 10)) < 0.3).astype(np.uint8), int(rng.integers(5)), t, -0.3) for t in range(20)]
    with pytest.raises(ValueError):
        predict_action(model, [])
    a = predict_action(model, hist)
    assert a == predict_action(model, hist)
    assert a == predict_action(model, hist[-8:])
    # slots older than the last K have no influence
    changed = [Transition(x.rtg + 9, 1 - x.obs, (x.action + 1) % 5, x.timestep, 0.0) for x in hist[:12]] + hist[12:]
    assert predict_action(model, changed) == a
    g1, g2 = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    assert predict_action(model, hist, sample=True, generator=g1) == predict_action(model, hist, sample=True, generator=g2)
