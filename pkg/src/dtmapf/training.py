"""Training, gradient checking, checkpoints and action inference for the
Decision Transformer."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .env import Action
from .model import DecisionTransformer, DTConfig, TokenBatch, masked_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DTMAPFCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "uint8": torch.uint8,
    "int64": torch.int64,
}


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 6e-4
    weight_decay: float = 0.1
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    batch_size: int = 64
    steps: int = 2000
    rtg_scale: float = 20.0
    deterministic: bool = True
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        self.betas = tuple(self.betas)

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class TrainState:
    model: DecisionTransformer
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    rng: np.random.Generator = None
    torch_rng: torch.Tensor = None
    running_loss: float = float("nan")
    running_acc: float = float("nan")

    @classmethod
    def create(cls, dt_config: DTConfig = DTConfig(), config: TrainConfig = TrainConfig()) -> "TrainState":
        model = DecisionTransformer(dt_config)
        opt = make_optimizer(model, config)
        g = torch.Generator().manual_seed(config.seed)
        return cls(model, opt, config, 0, np.random.default_rng(config.seed), g.get_state())


def make_optimizer(model: DecisionTransformer, config: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        # biases, norms and lookup tables are not decayed
        (decay if p.ndim >= 2 and "embed" not in name.split(".")[0] else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=config.lr, betas=config.betas)


@contextmanager
def _torch_rng(state: TrainState):
    with torch.random.fork_rng():
        torch.set_rng_state(state.torch_rng)
        yield
        state.torch_rng = torch.get_rng_state()


def train_step(state: TrainState, batch: TokenBatch) -> tuple[TrainState, float, float]:
    """One AdamW update on masked action cross-entropy.

    A batch without real slots leaves the state untouched and reports 0 loss.
    """
    if not bool(batch.mask.any()):
        return state, 0.0, 0.0
    if state.config.deterministic:
        torch.use_deterministic_algorithms(True)
    model = state.model
    model.train()
    batch = batch.trimmed()
    with _torch_rng(state):
        logits = model(batch)
        loss, acc, _ = masked_loss(logits, batch.actions, batch.mask)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {state.step}")
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        norm = torch.nn.utils.clip_grad_norm_(model.parameters(), state.config.grad_clip)
        if not torch.isfinite(norm):
            norms = {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}
            raise TrainingDiverged(f"non-finite gradient at step {state.step}: {norms}")
        state.optimizer.step()
    state.step += 1
    val = loss.item()
    a = 0.98
    state.running_loss = val if math.isnan(state.running_loss) else a * state.running_loss + (1 - a) * val
    state.running_acc = acc if math.isnan(state.running_acc) else a * state.running_acc + (1 - a) * acc
    state.last_grad_norm = float(norm)
    return state, val, acc


def sample_batch(chunks: Sequence, state: TrainState) -> TokenBatch:
    idx = state.rng.integers(len(chunks), size=state.config.batch_size)
    return TokenBatch.from_chunks([chunks[i] for i in idx], state.config.rtg_scale)


@torch.no_grad()
def evaluate_accuracy(model: DecisionTransformer, chunks: Sequence, rtg_scale: float, batch_size: int = 256) -> float:
    model.eval()
    hit = total = 0
    for s in range(0, len(chunks), batch_size):
        b = TokenBatch.from_chunks(chunks[s : s + batch_size], rtg_scale).trimmed()
        pred = model(b).argmax(-1)
        hit += int((pred == b.actions)[b.mask].sum())
        total += int(b.mask.sum())
    return hit / max(total, 1)


def train(
    chunks: Sequence,
    dt_config: DTConfig = DTConfig(),
    config: TrainConfig = TrainConfig(),
    out_dir=None,
    state: TrainState | None = None,
    stop_at_accuracy: float | None = None,
) -> TrainState:
    """Train for ``config.steps`` steps (resuming ``state`` if given).

    Writes ``train_log.csv`` and ``model.ckpt`` into ``out_dir`` when set.
    With ``stop_at_accuracy``, training stops early once full-corpus action
    accuracy (checked every ``log_every`` steps) reaches that level.
    """
    state = state or TrainState.create(dt_config, config)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train_log.csv", "a" if state.step else "w", newline="")
        writer = csv.writer(fh)
        if not state.step:
            writer.writerow(["step", "loss", "accuracy", "grad_norm"])
    try:
        while state.step < config.steps:
            batch = sample_batch(chunks, state)
            state, loss, acc = train_step(state, batch)
            if writer:
                writer.writerow([state.step, f"{loss:.6f}", f"{acc:.6f}", f"{getattr(state, 'last_grad_norm', 0.0):.6f}"])
            if state.step % config.log_every == 0:
                log.info("step %d loss %.4f acc %.3f", state.step, state.running_loss, state.running_acc)
                if stop_at_accuracy is not None and state.running_acc >= stop_at_accuracy:
                    full = evaluate_accuracy(state.model, chunks, config.rtg_scale)
                    log.info("step %d corpus accuracy %.4f", state.step, full)
                    if full >= stop_at_accuracy:
                        break
    finally:
        if writer:
            fh.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "model.ckpt")
    return state


# --- gradient check ----------------------------------------------------------

def gradcheck(
    model: DecisionTransformer,
    batch: TokenBatch,
    names: Sequence[str] | None = None,
    n_coords: int = 200,
    eps: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
    stats: dict | None = None,
) -> dict[str, float]:
    """Max relative error between autograd and central differences, per tensor.

    Runs in double precision with dropout off. Embedding tables are sampled
    only in rows the batch actually uses. ``floor`` bounds the denominator
    so gradients that are zero up to rounding (e.g. attention key biases)
    don't turn difference noise into large relative errors.

    A coordinate whose +-eps stencil crosses a ReLU or max-pool kink has no
    valid central difference; such coordinates are skipped (counted in
    ``stats[name]["skipped"]``) and replaced by fresh samples.
    """
    model = model.double().eval()
    batch = batch.to(torch.float64)
    params = dict(model.named_parameters())
    names = list(names) if names is not None else list(params)
    rng = np.random.default_rng(seed)
    real_obs = batch.obs[batch.mask]

    def loss_fn():
        return masked_loss(model(batch), batch.actions, batch.mask)[0]

    def pattern():
        return model.obs_encoder.activation_pattern(real_obs)

    model.zero_grad()
    loss_fn().backward()
    errors = {}
    stats = {} if stats is None else stats
    used_rows = {
        "action_embed.weight": torch.unique(batch.actions[batch.mask]).tolist(),
        "timestep_embed.weight": torch.unique(
            batch.timesteps[batch.mask].clamp(0, model.cfg.max_timestep - 1)
        ).tolist(),
    }
    with torch.no_grad():
        base = pattern()
        for name in names:
            p = params[name]
            grad = p.grad.detach().clone()
            flat = p.data.view(-1)
            if name in used_rows:
                cols = p.shape[1]
                pool = np.array([r * cols + c for r in used_rows[name] for c in range(cols)])
            else:
                pool = np.arange(flat.numel())
            kinked = name.startswith("obs_encoder.")
            worst, checked, skipped = 0.0, 0, 0
            for i in rng.permutation(pool):
                if checked >= n_coords:
                    break
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                smooth = not kinked or torch.equal(pattern(), base)
                flat[i] = orig - eps
                down = loss_fn().item()
                smooth = smooth and (not kinked or torch.equal(pattern(), base))
                flat[i] = orig
                if not smooth:
                    skipped += 1
                    continue
                num = (up - down) / (2 * eps)
                ana = grad.view(-1)[i].item()
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
                checked += 1
            errors[name] = worst
            stats[name] = {"checked": checked, "skipped": skipped}
    return errors


def perturb_parameters(model: nn.Module, std: float = 0.02, seed: int = 0) -> nn.Module:
    """Add Gaussian noise to every parameter in place.

    Zero-initialised biases put ReLU inputs exactly on the kink for blank
    observation patches; a gradient check needs a generic point.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


# --- inference ---------------------------------------------------------------

def histories_to_batch(histories: Sequence[Sequence], K: int, rtg_scale: float, dtype=torch.float32) -> TokenBatch:
    """Left-aligned batch of the last K slots of each history."""
    B = len(histories)
    rtg = torch.zeros(B, K, dtype=dtype)
    obs = torch.zeros(B, K, 4, 10, 10, dtype=dtype)
    actions = torch.zeros(B, K, dtype=torch.long)
    ts = torch.zeros(B, K, dtype=torch.long)
    mask = torch.zeros(B, K, dtype=torch.bool)
    for b, hist in enumerate(histories):
        if not hist:
            raise ValueError("empty history")
        window = list(hist)[-K:]
        for k, x in enumerate(window):
            rtg[b, k] = float(x.rtg) / rtg_scale
            obs[b, k] = torch.as_tensor(np.asarray(x.obs), dtype=dtype)
            actions[b, k] = int(x.action) if x.action is not None else 0
            ts[b, k] = int(x.timestep)
            mask[b, k] = True
    return TokenBatch(rtg, obs, actions, ts, mask)


@torch.no_grad()
def predict_actions(
    model: DecisionTransformer,
    histories: Sequence[Sequence],
    rtg_scale: float = 20.0,
    sample: bool = False,
    generator: torch.Generator | None = None,
    temperature: float = 1.0,
) -> list[Action]:
    """Action for the last slot of each history (whose action is unknown)."""
    model.eval()
    K = model.cfg.context_length
    dtype = model.action_head.weight.dtype
    batch = histories_to_batch(histories, K, rtg_scale, dtype).trimmed()
    logits = model(batch)
    last = batch.mask.sum(1) - 1
    sel = logits[torch.arange(len(histories)), last]
    if sample:
        probs = torch.softmax(sel / temperature, -1)
        picks = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
    else:
        picks = sel.argmax(-1)
    return [Action(int(a)) for a in picks]


def predict_action(model, history, rtg_scale: float = 20.0, sample: bool = False, generator=None) -> Action:
    return predict_actions(model, [history], rtg_scale, sample, generator)[0]


# --- checkpoints -------------------------------------------------------------

def _state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {f"model.{n}": p.detach() for n, p in state.model.named_parameters()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(st[key]).detach()
    tensors["rng.torch"] = state.torch_rng
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned binary checkpoint: header, JSON table, raw tensors, sha256."""
    tensors = _state_tensors(state)
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].contiguous().cpu()
        raw = t.numpy().tobytes()
        table.append({"name": name, "dtype": str(t.dtype).replace("torch.", ""), "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "dt_config": state.model.cfg.to_json(),
        "train_config": asdict(state.config),
        "step": state.step,
        "numpy_rng": state.rng.bit_generator.state,
        "running": [state.running_loss, state.running_acc],
        "tensors": table,
    }
    meta = json.dumps(header, sort_keys=True).encode()
    body = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0) + struct.pack("<Q", len(meta)) + meta + b"".join(blobs)
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(path, dt_config: DTConfig | None = None) -> TrainState:
    """Restore a TrainState; with ``dt_config``, tensor shapes must match it."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = data[:-32], data[-32:]
    magic, version, _ = _CKPT_HEADER.unpack_from(body, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted file)")
    off = _CKPT_HEADER.size
    (n,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = json.loads(body[off : off + n])
    off += n
    tensors = {}
    for e in header["tensors"]:
        raw = body[off + e["offset"] : off + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)

    stored_cfg = DTConfig.from_json(header["dt_config"])
    cfg = dt_config or stored_cfg
    model = DecisionTransformer(cfg)
    expected = {f"model.{k}": tuple(v.shape) for k, v in model.named_parameters()}
    got = {k: tuple(v.shape) for k, v in tensors.items() if k.startswith("model.")}
    if expected != got:
        diff = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))
        raise ShapeMismatchError(
            f"checkpoint does not match model config; differing tensors: "
            + ", ".join(f"{k} {got.get(k)} vs {expected.get(k)}" for k in diff[:5])
        )
    with torch.no_grad():
        for k, p in model.named_parameters():
            p.copy_(tensors[f"model.{k}"])
    config = TrainConfig.from_json(header["train_config"])
    opt = make_optimizer(model, config)
    for k, p in model.named_parameters():
        if f"optim.{k}.exp_avg" in tensors:
            opt.state[p] = {
                "step": tensors[f"optim.{k}.step"].clone(),
                "exp_avg": tensors[f"optim.{k}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"optim.{k}.exp_avg_sq"].clone(),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = header["numpy_rng"]
    state = TrainState(model, opt, config, header["step"], rng, tensors["rng.torch"].clone())
    state.running_loss, state.running_acc = header["running"]
    return state


def load_model(path) -> tuple[DecisionTransformer, TrainConfig]:
    state = load_checkpoint(path)
    state.model.eval()
    return state.model, state.config
