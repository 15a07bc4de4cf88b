"""Decision Transformer over (return-to-go, observation, action) tokens.

Observations are embedded by a small conv net; returns by a linear map of
the scalar; actions and absolute episode timesteps by lookup tables. The
three tokens of each slot are interleaved into a 3K-long causal stream and
the action for slot t is predicted from the hidden state at its
observation token.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DTConfig:
    context_length: int = 50
    embed_dim: int = 128
    n_layers: int = 3
    n_heads: int = 4
    n_actions: int = 5
    max_timestep: int = 512
    dropout: float = 0.1
    conv_channels: tuple = (16, 128)
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "DTConfig":
        return cls(**data)


@dataclass
class TokenBatch:
    rtg: torch.Tensor  # (B, K) float
    obs: torch.Tensor  # (B, K, 4, 10, 10) float
    actions: torch.Tensor  # (B, K) long
    timesteps: torch.Tensor  # (B, K) long
    mask: torch.Tensor  # (B, K) bool

    def __post_init__(self):
        B, K = self.mask.shape
        for name in ("rtg", "actions", "timesteps"):
            if tuple(getattr(self, name).shape) != (B, K):
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {(B, K)}")
        if tuple(self.obs.shape) != (B, K, 4, 10, 10):
            raise ValueError(f"obs has shape {tuple(self.obs.shape)}")

    def to(self, dtype=None) -> "TokenBatch":
        return TokenBatch(
            self.rtg.to(dtype) if dtype else self.rtg,
            self.obs.to(dtype) if dtype else self.obs,
            self.actions,
            self.timesteps,
            self.mask,
        )

    def rows(self, idx) -> "TokenBatch":
        return TokenBatch(self.rtg[idx], self.obs[idx], self.actions[idx], self.timesteps[idx], self.mask[idx])

    @classmethod
    def from_chunks(cls, chunks, rtg_scale: float = 1.0, dtype=torch.float32) -> "TokenBatch":
        m = torch.from_numpy(np.stack([c.mask for c in chunks]))
        batch = cls(
            torch.from_numpy(np.stack([c.rtg for c in chunks])).to(dtype) / rtg_scale,
            torch.from_numpy(np.stack([c.obs for c in chunks])).to(dtype),
            torch.from_numpy(np.stack([c.actions for c in chunks]).astype(np.int64)),
            torch.from_numpy(np.stack([c.timesteps for c in chunks]).astype(np.int64)),
            m,
        )
        return batch.zero_padding()

    def trimmed(self) -> "TokenBatch":
        """Drop trailing slots that are padding in every row.

        Exact for real slots: padding is trailing and attention is causal.
        """
        n = int(self.mask.sum(1).max()) if self.mask.numel() else 0
        n = max(n, 1)
        return TokenBatch(self.rtg[:, :n], self.obs[:, :n], self.actions[:, :n], self.timesteps[:, :n], self.mask[:, :n])

    def zero_padding(self) -> "TokenBatch":
        m = self.mask
        return TokenBatch(
            self.rtg * m,
            self.obs * m[:, :, None, None, None],
            self.actions * m,
            self.timesteps * m,
            m,
        )


class ObsEncoder(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> maxpool 2x2 -> linear."""

    def __init__(self, channels: Sequence[int], embed_dim: int):
        super().__init__()
        c1, c2 = channels
        self.conv1 = nn.Conv2d(4, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.proj = nn.Linear(c2 * 5 * 5, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (4, 10, 10):
            raise ValueError(f"observation shape {tuple(x.shape[-3:])} != (4, 10, 10)")
        lead = x.shape[:-3]
        x = x.reshape(-1, 4, 10, 10)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.max_pool2d(x, 2)
        return self.proj(x.flatten(1)).reshape(*lead, self.proj.out_features)

    def activation_pattern(self, x: torch.Tensor) -> torch.Tensor:
        """ReLU signs and max-pool winners, flattened. The encoder is smooth
        between two parameter values iff this pattern is the same at both
        (up to ties among zeros, which don't affect the output)."""
        x = x.reshape(-1, 4, 10, 10)
        z1 = self.conv1(x)
        z2 = self.conv2(F.relu(z1))
        pooled, idx = F.max_pool2d(F.relu(z2), 2, return_indices=True)
        idx = torch.where(pooled > 0, idx, -1)
        return torch.cat([(z1 > 0).flatten(), (z2 > 0).flatten(), idx.flatten()])


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: DTConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim)
        self.out = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.attn_drop = nn.Dropout(cfg.dropout)
        self.resid_drop = nn.Dropout(cfg.dropout)

    def forward(self, x, allowed, record=None):
        B, T, D = x.shape
        hd = D // self.n_heads
        q, k, v = self.qkv(x).split(D, dim=2)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~allowed[:, None], float("-inf"))
        att = F.softmax(att, dim=-1)
        if record is not None:
            record.append(att.detach())
        att = self.attn_drop(att)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.resid_drop(self.out(y))


class Block(nn.Module):
    def __init__(self, cfg: DTConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.embed_dim)
        hidden = cfg.mlp_ratio * cfg.embed_dim
        self.mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, cfg.embed_dim),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, allowed, record=None):
        x = x + self.attn(self.ln1(x), allowed, record)
        return x + self.mlp(self.ln2(x))


class DecisionTransformer(nn.Module):
    def __init__(self, cfg: DTConfig = DTConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.random.fork_rng()
        with gen:
            torch.manual_seed(cfg.seed)
            D = cfg.embed_dim
            self.obs_encoder = ObsEncoder(cfg.conv_channels, D)
            self.rtg_embed = nn.Linear(1, D)
            self.action_embed = nn.Embedding(cfg.n_actions, D)
            self.timestep_embed = nn.Embedding(cfg.max_timestep, D)
            self.embed_ln = nn.LayerNorm(D)
            self.drop = nn.Dropout(cfg.dropout)
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
            self.ln_f = nn.LayerNorm(D)
            self.action_head = nn.Linear(D, cfg.n_actions)
            self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, mean=0.0, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, batch: TokenBatch) -> torch.Tensor:
        """Interleaved token embeddings, shape (B, 3K, D)."""
        B, K = batch.mask.shape
        if K > self.cfg.context_length:
            raise ValueError(f"sequence length {K} exceeds context length {self.cfg.context_length}")
        ts = self.timestep_embed(batch.timesteps.clamp(0, self.cfg.max_timestep - 1))
        r = self.rtg_embed(batch.rtg.unsqueeze(-1)) + ts
        # only real slots are encoded; padded observation tokens stay zero
        enc = self.obs_encoder(batch.obs[batch.mask])
        o = torch.zeros(B, K, enc.shape[-1], dtype=enc.dtype, device=enc.device)
        o = o.masked_scatter(batch.mask[..., None], enc) + ts
        a = self.action_embed(batch.actions) + ts
        return torch.stack([r, o, a], dim=2).reshape(B, 3 * K, -1)

    def attention_mask(self, mask: torch.Tensor) -> torch.Tensor:
        """(B, 3K, 3K) boolean: causal, padded keys hidden except to themselves."""
        B, K = mask.shape
        T = 3 * K
        causal = torch.ones(T, T, dtype=torch.bool, device=mask.device).tril()
        keys = mask.repeat_interleave(3, dim=1)
        allowed = causal[None] & keys[:, None, :]
        return allowed | torch.eye(T, dtype=torch.bool, device=mask.device)[None]

    def hidden(self, batch: TokenBatch, record=None) -> torch.Tensor:
        x = self.drop(self.embed_ln(self.embed(batch)))
        allowed = self.attention_mask(batch.mask)
        for blk in self.blocks:
            x = blk(x, allowed, record)
        return self.ln_f(x)

    def forward(self, batch: TokenBatch, record: list | None = None) -> torch.Tensor:
        """Action logits (B, K, n_actions), read at each observation token."""
        h = self.hidden(batch, record)
        return self.action_head(h[:, 1::3])

    def encode_obs(self, obs) -> torch.Tensor:
        obs = torch.as_tensor(obs, dtype=self.action_head.weight.dtype)
        return self.obs_encoder(obs)


def masked_loss(logits: torch.Tensor, actions: torch.Tensor, mask: torch.Tensor):
    """Cross-entropy and accuracy over real slots. Returns (loss, acc, n_real)."""
    n = int(mask.sum())
    if n == 0:
        return logits.sum() * 0.0, 0.0, 0
    sel = logits[mask]
    target = actions[mask]
    loss = F.cross_entropy(sel, target)
    acc = (sel.argmax(-1) == target).float().mean().item()
    return loss, acc, n
