"""Minimal dual-mode transformer: one weight stack serves causal generation
and single-position mask infilling, with rotary positions and zero-initialized
time conditioning so the time-augmented model starts exactly at the base model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ModeFlag(Enum):
    CAUSAL_GEN = 0
    MASK_INFILL = 1


@dataclass
class ModelConfig:
    vocab_size: int
    l_max: int
    t_max: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    d_time: int = 16
    time_features: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("rotary encoding needs an even head dimension")
        for name in ("vocab_size", "l_max", "t_max", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def bos_id(self) -> int:
        # internal start marker for causal mode; never emitted
        return self.vocab_size + 1

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _rotary(q: torch.Tensor, k: torch.Tensor, positions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate query/key pairs by position-dependent angles (relative-position attention)."""
    hd = q.shape[-1]
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, hd, 2, dtype=q.dtype) / hd))
    ang = positions.to(q.dtype)[:, None] * inv_freq[None, :]  # (S, hd/2)
    cos, sin = torch.cos(ang), torch.sin(ang)

    def rot(x):
        x1, x2 = x[..., 0::2], x[..., 1::2]
        out = torch.empty_like(x)
        out[..., 0::2] = x1 * cos - x2 * sin
        out[..., 1::2] = x1 * sin + x2 * cos
        return out

    return rot(q), rot(k)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, causal: bool, positions: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=2)
        shape = (B, S, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        q, k = _rotary(q, k, positions)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if causal:
            future = torch.triu(torch.ones(S, S, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, S, D))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x, causal, positions, mod=None):
        if mod is None:
            x = x + self.attn(self.ln1(x), causal, positions)
            return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        sh1, sc1, g1, sh2, sc2, g2 = mod
        h = self.ln1(x) * (1 + sc1) + sh1
        x = x + (1 + g1) * self.attn(h, causal, positions)
        h = self.ln2(x) * (1 + sc2) + sh2
        return x + (1 + g2) * self.fc2(F.gelu(self.fc1(h)))


class TimeConditioner(nn.Module):
    """Sinusoidal features of t / t_max, a 2-layer projection, and one
    zero-initialized modulation projection per block (shift/scale/gate for
    both sublayers). Zero projections make the augmented model reproduce
    the base model at every t until training moves them."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.t_max = cfg.t_max
        self.n_feat = cfg.time_features
        self.fc1 = nn.Linear(cfg.time_features, cfg.d_time)
        self.fc2 = nn.Linear(cfg.d_time, cfg.d_time)
        self.mods = nn.ModuleList(
            nn.Linear(cfg.d_time, 6 * cfg.d_model, bias=False) for _ in range(cfg.n_layers)
        )

    def features(self, t: torch.Tensor) -> torch.Tensor:
        tau = t.to(self.fc1.weight.dtype) / self.t_max
        half = self.n_feat // 2
        freqs = torch.exp(
            torch.linspace(0.0, math.log(1000.0), half, dtype=tau.dtype, device=tau.device)
        )
        ang = tau[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)

    def forward(self, t: torch.Tensor) -> list[tuple[torch.Tensor, ...]]:
        h = F.silu(self.fc2(F.silu(self.fc1(self.features(t)))))
        out = []
        for lin in self.mods:
            parts = lin(h)[:, None, :].chunk(6, dim=-1)  # each (B, 1, d_model)
            out.append(parts)
        return out


class DualModeTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size + 2, cfg.d_model)
        self.mode_emb = nn.Embedding(2, cfg.d_model)
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.n_heads, cfg.d_ff) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.time_cond: TimeConditioner | None = None
        self.to(cfg.torch_dtype)

    @property
    def augmented(self) -> bool:
        return self.time_cond is not None

    def forward(
        self,
        tokens: torch.Tensor,
        mode: ModeFlag,
        t: torch.Tensor | int | None = None,
        pos_offset: int = 0,
    ) -> torch.Tensor:
        """Logits (B, S, vocab). ``t`` is required once time conditioning exists."""
        B, S = tokens.shape
        if S > self.cfg.l_max + 1:
            raise ValueError(f"sequence length {S} exceeds l_max+1 = {self.cfg.l_max + 1}")
        x = self.tok_emb(tokens) + self.mode_emb(
            torch.full((1,), mode.value, dtype=torch.long, device=tokens.device)
        )
        mods = None
        if self.time_cond is not None:
            if t is None:
                raise ValueError("time-conditioned model requires t")
            t = torch.as_tensor(t, device=tokens.device)
            if t.ndim == 0:
                t = t.expand(B)
            mods = self.time_cond(t)
        positions = torch.arange(pos_offset, pos_offset + S, device=tokens.device)
        causal = mode is ModeFlag.CAUSAL_GEN
        for i, block in enumerate(self.blocks):
            x = block(x, causal, positions, mods[i] if mods else None)
        return self.head(self.ln_f(x))

    # -- batched distribution helpers (differentiable) --

    def infill_dist_masked(self, tokens: torch.Tensor, ks: torch.Tensor, ts) -> torch.Tensor:
        """Infill distributions at ks for inputs that already contain masks."""
        logits = self.forward(tokens, ModeFlag.MASK_INFILL, ts)
        rows = torch.arange(tokens.shape[0], device=tokens.device)
        return torch.softmax(logits[rows, ks], dim=-1)

    def infill_dist(self, tokens: np.ndarray, ks: np.ndarray, ts) -> torch.Tensor:
        """Mask coordinate ks[b] in row b and return its infill distribution."""
        toks = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        ks = torch.as_tensor(np.asarray(ks), dtype=torch.long)
        rows = torch.arange(toks.shape[0])
        toks = toks.clone()
        toks[rows, ks] = self.cfg.mask_id
        return self.infill_dist_masked(toks, ks, torch.as_tensor(np.asarray(ts)))

    def causal_dist(self, prefixes: np.ndarray | torch.Tensor, ts) -> torch.Tensor:
        """Next-token distribution after each row's prefix (BOS prepended)."""
        toks = torch.as_tensor(np.asarray(prefixes), dtype=torch.long)
        if toks.ndim == 1:
            toks = toks[None, :]
        B = toks.shape[0]
        bos = torch.full((B, 1), self.cfg.bos_id, dtype=torch.long)
        logits = self.forward(torch.cat([bos, toks], dim=1), ModeFlag.CAUSAL_GEN,
                              torch.as_tensor(np.asarray(ts)))
        return torch.softmax(logits[:, -1], dim=-1)


def init_base(cfg: ModelConfig, rng: np.random.Generator) -> DualModeTransformer:
    """Fresh base weights from a numpy stream: 1/sqrt(d_model)-scaled projections,
    0.02-scaled embeddings, zero biases. No time conditioning yet."""
    model = DualModeTransformer(cfg)
    scale = 1.0 / math.sqrt(cfg.d_model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or ".ln" in name or name.startswith("ln_f"):
                p.zero_() if name.endswith("bias") else p.fill_(1.0)
            elif "emb" in name:
                p.copy_(torch.as_tensor(rng.normal(0.0, 0.02, size=p.shape)))
            else:
                p.copy_(torch.as_tensor(rng.normal(0.0, scale, size=p.shape)))
    return model


def augment_time(model: DualModeTransformer, rng: np.random.Generator) -> DualModeTransformer:
    """Attach time conditioning. Modulation projections start at exactly zero,
    so outputs match the base model bit-for-bit until the first update."""
    if model.augmented:
        raise ValueError("model already carries time conditioning")
    cond = TimeConditioner(model.cfg).to(model.cfg.torch_dtype)
    with torch.no_grad():
        for name, p in cond.named_parameters():
            if name.startswith("mods"):
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.as_tensor(rng.normal(0.0, 1.0 / math.sqrt(p.shape[-1]), size=p.shape)))
    model.time_cond = cond
    return model


def param_counts(model: DualModeTransformer) -> tuple[int, int]:
    """(base parameter count, time-conditioning parameter count)."""
    base = sum(p.numel() for n, p in model.named_parameters() if not n.startswith("time_cond"))
    gamma = sum(p.numel() for n, p in model.named_parameters() if n.startswith("time_cond"))
    return base, gamma


def infill_logits(model: DualModeTransformer, x: np.ndarray, k: int, t: int) -> np.ndarray:
    """Distribution over the vocabulary for the single masked position k."""
    x = np.asarray(x)
    masked = np.nonzero(x == model.cfg.mask_id)[0]
    if len(masked) != 1:
        raise ValueError(f"expected exactly one masked position, found {len(masked)}")
    if masked[0] != k:
        raise ValueError(f"mask at {masked[0]} but k={k}")
    if not 0 <= t <= model.cfg.t_max:
        raise ValueError(f"t={t} outside 0..{model.cfg.t_max}")
    with torch.no_grad():
        probs = model.infill_dist_masked(
            torch.as_tensor(x, dtype=torch.long)[None, :], torch.tensor([k]), torch.tensor([t]))
    return probs[0].double().numpy()


def causal_next_logits(model: DualModeTransformer, prefix: np.ndarray, t: int) -> np.ndarray:
    """Next-token distribution given a (possibly empty) prefix."""
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if len(prefix) >= model.cfg.l_max + 1:
        raise ValueError(f"prefix length {len(prefix)} too long for l_max {model.cfg.l_max}")
    with torch.no_grad():
        probs = model.causal_dist(prefix[None, :], torch.tensor([t]))
    return probs[0].double().numpy()


@dataclass
class GradientTape:
    """Reverse-mode gradients keyed by parameter name."""

    grads: dict[str, torch.Tensor] = field(default_factory=dict)


def backprop(model: nn.Module, loss: torch.Tensor) -> GradientTape:
    """Gradients of a scalar loss for every trainable parameter (zeros where unused)."""
    if loss.ndim != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite loss {loss.item()}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    tape = GradientTape()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        tape.grads[name] = (p.grad.detach().clone() if p.grad is not None
                            else torch.zeros_like(p))
    return tape


class NetKernel:
    """Conditional-model adapter pinning a network to one model time.

    Used as the forward noising kernel (frozen copy at the final time); the
    ``t`` argument of the contract is accepted and ignored.
    """

    def __init__(self, model: DualModeTransformer, t: int):
        self.model = model
        self.t = t
        self.sigma = model.cfg.vocab_size

    def infill(self, x: np.ndarray, k: int, t: int = 0) -> np.ndarray:
        return self.infill_batch(np.asarray(x)[None, :], k)[0]

    def infill_batch(self, X: np.ndarray, k: int, t: int = 0) -> np.ndarray:
        B = X.shape[0]
        with torch.no_grad():
            probs = self.model.infill_dist(X, np.full(B, k), np.full(B, self.t))
        return probs.double().numpy()

    def causal_next(self, prefix: np.ndarray) -> np.ndarray:
        return causal_next_logits(self.model, prefix, self.t)
