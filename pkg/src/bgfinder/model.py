"""Encoder-decoder policy/value network: signal tokens feed the encoder, background tokens the decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .environment import EnvState, Environment

CHECKPOINT_VERSION = "bgfinder-ckpt/1"


class NonFiniteLoss(RuntimeError):
    pass


class Diverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 53
    n_actions: int = 51
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 3
    d_ff: int = 256
    max_signal_len: int = 32
    max_bg_len: int = 33  # Sep plus the background budget
    pad_id: int = 52
    sep_id: int = 51
    seed: int = 0

    @classmethod
    def for_env(cls, env: Environment, **kw) -> "ModelConfig":
        v = env.vocab
        return cls(
            vocab_size=v.size, n_actions=v.n_actions, pad_id=v.pad, sep_id=v.sep,
            max_signal_len=env.max_len, max_bg_len=env.max_len + 1, **kw,
        )


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        assert d % heads == 0
        self.h = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, mask):
        # mask: broadcastable to [B, h, Lq, Lk], True where attention is allowed
        B, Lq, d = x.shape
        Lk = mem.shape[1]
        dh = d // self.h
        q = self.q(x).view(B, Lq, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(B, Lk, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(B, Lk, self.h, dh).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = att.masked_fill(~mask, float("-inf")).softmax(-1)
        att = torch.nan_to_num(att)  # rows with no visible key (pad queries)
        y = (att @ v).transpose(1, 2).reshape(B, Lq, d)
        return self.o(y)


class FeedForward(nn.Module):
    def __init__(self, d: int, ff: int):
        super().__init__()
        self.a = nn.Linear(d, ff)
        self.b = nn.Linear(ff, d)

    def forward(self, x):
        return self.b(F.gelu(self.a(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ff):
        super().__init__()
        self.ln1, self.att, self.ln2, self.ff = nn.LayerNorm(d), Attention(d, heads), nn.LayerNorm(d), FeedForward(d, ff)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.att(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ff):
        super().__init__()
        self.ln1, self.self_att = nn.LayerNorm(d), Attention(d, heads)
        self.ln2, self.cross = nn.LayerNorm(d), Attention(d, heads)
        self.ln3, self.ff = nn.LayerNorm(d), FeedForward(d, ff)

    def forward(self, x, mem, self_mask, cross_mask):
        h = self.ln1(x)
        x = x + self.self_att(h, h, self_mask)
        x = x + self.cross(self.ln2(x), mem, cross_mask)
        return x + self.ff(self.ln3(x))


class PolicyValueNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):  # seeded init without touching the global stream
            torch.manual_seed(cfg.seed)
            d = cfg.d_model
            self.tok = nn.Embedding(cfg.vocab_size, d)
            self.enc_pos = nn.Embedding(cfg.max_signal_len, d)
            self.dec_pos = nn.Embedding(cfg.max_bg_len, d)
            self.encoder = nn.ModuleList(EncoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.enc_layers))
            self.decoder = nn.ModuleList(DecoderLayer(d, cfg.n_heads, cfg.d_ff) for _ in range(cfg.dec_layers))
            self.enc_ln = nn.LayerNorm(d)
            self.dec_ln = nn.LayerNorm(d)
            self.policy = nn.Linear(d, cfg.n_actions)
            self.value = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 1))

    def backbone(self, sig: torch.Tensor, dec: torch.Tensor, last: torch.Tensor) -> torch.Tensor:
        """Decoder output at position ``last`` of each row (the newest background token)."""
        cfg = self.cfg
        B, Ls = sig.shape
        Ld = dec.shape[1]
        sig_keep = sig != cfg.pad_id
        dec_keep = dec != cfg.pad_id
        x = self.tok(sig) + self.enc_pos(torch.arange(Ls, device=sig.device))
        enc_mask = sig_keep[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, enc_mask)
        mem = self.enc_ln(x)
        y = self.tok(dec) + self.dec_pos(torch.arange(Ld, device=dec.device))
        causal = torch.ones(Ld, Ld, dtype=torch.bool, device=dec.device).tril()
        self_mask = causal[None, None] & dec_keep[:, None, None, :]
        for layer in self.decoder:
            y = layer(y, mem, self_mask, enc_mask)
        y = self.dec_ln(y)
        return y[torch.arange(B), last]

    def forward(self, sig, dec, last):
        h = self.backbone(sig, dec, last)
        return self.policy(h), self.value(h).squeeze(-1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def hand_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of the module tree."""
    d, ff = cfg.d_model, cfg.d_ff
    att = 4 * (d * d + d)
    ln = 2 * d
    mlp = d * ff + ff + ff * d + d
    enc = att + mlp + 2 * ln
    dec = 2 * att + mlp + 3 * ln
    emb = cfg.vocab_size * d + cfg.max_signal_len * d + cfg.max_bg_len * d
    heads = (d * cfg.n_actions + cfg.n_actions) + (d * d + d + d + 1)
    return emb + cfg.enc_layers * enc + cfg.dec_layers * dec + 2 * ln + heads


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return logits.masked_fill(~mask, float("-inf")).softmax(-1).nan_to_num(0.0)


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return logits.masked_fill(~mask, float("-inf")).log_softmax(-1)


# --- batching ----------------------------------------------------------------

def encode(states: Sequence[EnvState], cfg: ModelConfig, device="cpu"):
    """Pad signal and decoder inputs; the decoder input starts with Sep."""
    B = len(states)
    ls = max(len(s.signal.tokens) for s in states)
    ld = max(len(s.tokens) for s in states) + 1
    sig = np.full((B, ls), cfg.pad_id, dtype=np.int64)
    dec = np.full((B, ld), cfg.pad_id, dtype=np.int64)
    last = np.zeros(B, dtype=np.int64)
    for i, s in enumerate(states):
        sig[i, : len(s.signal.tokens)] = s.signal.tokens
        dec[i, 0] = cfg.sep_id
        dec[i, 1 : len(s.tokens) + 1] = s.tokens
        last[i] = len(s.tokens)
    return torch.from_numpy(sig).to(device), torch.from_numpy(dec).to(device), torch.from_numpy(last).to(device)


@dataclass
class Batch:
    """Rows are either search samples (visit target + value target) or supervision tuples."""

    states: list[EnvState]
    masks: np.ndarray  # [B, A] bool
    pi: np.ndarray  # [B, A] visit targets (zeros on supervision rows)
    z: np.ndarray  # [B] value targets
    search: np.ndarray  # [B] bool
    action: np.ndarray  # [B] expert action or -1
    weight: np.ndarray  # [B] R_i / T_i on supervision rows


@dataclass
class LossParts:
    total: torch.Tensor
    policy: float
    value: float
    supervised: float

    def as_dict(self) -> dict:
        return {"loss": self.total.item(), "policy_loss": self.policy, "value_loss": self.value, "supervised_loss": self.supervised}


def compute_loss(model: PolicyValueNet, batch: Batch, lam: float, dtype=torch.float32) -> LossParts:
    """CE(visits) + MSE(value) over search rows, plus lam * sum_i (R_i/T_i) * (-log p(expert action))."""
    cfg = model.cfg
    sig, dec, last = encode(batch.states, cfg)
    logits, value = model(sig, dec, last)
    mask = torch.from_numpy(batch.masks)
    logp = masked_log_softmax(logits, mask)
    search = torch.from_numpy(batch.search)
    zero = logits.sum() * 0
    if search.any():
        pi = torch.from_numpy(batch.pi).to(dtype)[search]
        lp = logp[search].masked_fill(~mask[search], 0.0)
        policy = -(pi * lp).sum(-1).mean()
        z = torch.from_numpy(batch.z).to(dtype)[search]
        vloss = F.mse_loss(value[search], z)
    else:
        policy = vloss = zero
    sup = torch.from_numpy(batch.action >= 0)
    if sup.any() and lam != 0:
        acts = torch.from_numpy(batch.action)[sup]
        w = torch.from_numpy(batch.weight).to(dtype)[sup]
        nll = -logp[sup].gather(1, acts[:, None]).squeeze(1)
        supervised = (w * nll).sum()
    else:
        supervised = zero
    total = policy + vloss + lam * supervised
    return LossParts(total, policy.item(), vloss.item(), supervised.item())


class Learner:
    """Owns the master weights and the Adam state."""

    def __init__(self, model: PolicyValueNet, lr: float = 1e-3, weight_decay: float = 1e-4, divergence_factor: float = 10.0):
        self.model = model
        self.opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
        self.divergence_factor = divergence_factor
        self.initial_loss: float | None = None

    def step(self, batch: Batch, lam: float) -> dict:
        self.model.train()
        parts = compute_loss(self.model, batch, lam)
        loss = parts.total
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss: {parts.as_dict()}")
        val = loss.item()
        if self.initial_loss is None:
            self.initial_loss = max(val, 1e-8)
        elif val > self.divergence_factor * self.initial_loss:
            raise Diverged(f"loss {val:.4g} exceeds {self.divergence_factor}x the initial {self.initial_loss:.4g}")
        self.opt.zero_grad()
        loss.backward()
        for p in self.model.parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteLoss("non-finite gradient")
        self.opt.step()
        return parts.as_dict()


# --- inference -------------------------------------------------------------

class PolicyValue:
    """Batched evaluator for search and sampling: masked priors plus values as numpy arrays."""

    def __init__(self, model: PolicyValueNet, env: Environment):
        self.model, self.env = model, env
        self.calls = 0

    @torch.no_grad()
    def __call__(self, states: Sequence[EnvState]) -> tuple[np.ndarray, np.ndarray]:
        self.model.eval()
        self.calls += 1
        sig, dec, last = encode(states, self.model.cfg)
        logits, value = self.model(sig, dec, last)
        mask = torch.from_numpy(np.stack([self.env.legal_actions(s) for s in states]))
        probs = masked_softmax(logits.double(), mask)
        return probs.numpy(), value.double().numpy()


@torch.no_grad()
def embed(model: PolicyValueNet, states: Sequence[EnvState], normalise: bool = True) -> np.ndarray:
    model.eval()
    h = model.backbone(*encode(states, model.cfg)).double()
    if normalise:
        h = F.normalize(h, dim=-1)
    return h.numpy()


def save_checkpoint(path, model: PolicyValueNet, learner: Learner | None = None, extra: dict | None = None) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "weights": model.state_dict(),
        "optimiser": learner.opt.state_dict() if learner else None,
        "extra": extra or {},
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[PolicyValueNet, dict | None, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    model = PolicyValueNet(ModelConfig(**blob["config"]))
    model.load_state_dict(blob["weights"])
    return model, blob["optimiser"], blob["extra"]
