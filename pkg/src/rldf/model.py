"""Tiny bidirectional transformer that predicts clean tokens from a masked state."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokens
from .diffusion import SequenceState
from .sampling import sample_token  # noqa: F401  (re-exported)

DTYPE = torch.float64
LOG_P_MIN = math.log(1e-12)
MLM_NORMALIZATIONS = ("length", "masked_mean")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = tokens.VOCAB_SIZE
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    max_len: int = 128
    seed: int = 0
    mask_id: int = tokens.MASK
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "n_layers", "n_heads", "ff_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0 <= self.mask_id < self.vocab_size:
            raise ValueError("mask_id must be a valid token id")

    def to_dict(self) -> dict:
        return asdict(self)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.ff_dim)
        self.fc2 = nn.Linear(cfg.ff_dim, d)

    def attend(self, x):
        B, S, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(D, dim=-1)
        q, k, v = (z.view(B, S, h, D // h).transpose(1, 2) for z in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // h)
        out = att.softmax(dim=-1) @ v  # no causal mask: every position sees every other
        return self.proj(out.transpose(1, 2).reshape(B, S, D))

    def forward(self, x):
        x = x + self.attend(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class DenoiserModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.pos = nn.Embedding(cfg.max_len, cfg.embed_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.vocab_size)
        bias = torch.zeros(cfg.vocab_size, dtype=DTYPE)
        bias[cfg.mask_id] = float("-inf")  # MASK is never a prediction
        self.register_buffer("_out_bias", bias, persistent=False)
        self.to(DTYPE)
        self.reset_parameters(cfg.seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed) % (2**63))
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln"):
                p.fill_(1.0)
            else:
                p.normal_(0.0, self.cfg.init_std, generator=g)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Logits ``[B, S, V]`` for token ids ``[B, S]``."""
        if ids.shape[-1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(ids.shape[-1])
        x = self.tok(ids) + self.pos(pos)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x)) + self._out_bias

    def response_logprobs(self, states: Sequence[SequenceState]) -> torch.Tensor:
        """Log-probabilities ``[N, L, V]`` at the response positions.

        All states must share prompt and response lengths.
        """
        ids = torch.tensor([s.ids for s in states], dtype=torch.long)
        P = len(states[0].prompt)
        return self(ids)[:, P:].log_softmax(dim=-1)

    @torch.no_grad()
    def predict(self, state: SequenceState) -> np.ndarray:
        return predict(self, state)


def predict(model: DenoiserModel, state: SequenceState) -> np.ndarray:
    """Per-position categorical distributions ``[L, V]`` for one state."""
    with torch.no_grad():
        return model.response_logprobs([state])[0].exp().numpy()


def entropy(dist: np.ndarray) -> np.ndarray:
    """Row entropies in nats."""
    p = np.asarray(dist, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


class MLMLoss(NamedTuple):
    loss: torch.Tensor
    n_masked: int
    skipped: int


def masked_lm_loss(model: DenoiserModel, ids: torch.Tensor, prompt_len: int,
                   hide: torch.Tensor, t_ratio: torch.Tensor,
                   normalization: str = "length") -> torch.Tensor:
    """Masked cross-entropy for a batch with a given mask pattern.

    ``hide`` is a boolean ``[B, L]`` over response positions.  Each sample's
    summed masked negative log-likelihood is scaled by ``1/t_ratio`` and
    divided by the response length (``"length"``, an unbiased per-token
    estimate) or by its own masked count (``"masked_mean"``).  Samples are
    then averaged; samples without masked positions contribute 0.
    """
    if normalization not in MLM_NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {MLM_NORMALIZATIONS}")
    x = ids.clone()
    resp = x[:, prompt_len:]
    resp[hide] = model.cfg.mask_id
    logp = model(x)[:, prompt_len:].log_softmax(-1)
    tgt = ids[:, prompt_len:]
    nll = -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    hidef = hide.to(DTYPE)
    count = hidef.sum(-1)
    denom = float(hide.shape[1]) if normalization == "length" else count.clamp(min=1.0)
    per_sample = (nll * hidef).sum(-1) / denom / t_ratio
    return per_sample.mean()


def mlm_loss(model: DenoiserModel, x0: Sequence[SequenceState] | SequenceState, t_ratio,
             rng: np.random.Generator, normalization: str = "length") -> MLMLoss:
    """Masked-diffusion pretraining loss on clean states ``x0``.

    ``t_ratio`` is a scalar or one value per state, each in (0, 1].  A sample
    whose mask draw hides nothing is redrawn once; if still empty it is
    skipped (zero contribution) and counted in ``skipped``.
    """
    states = [x0] if isinstance(x0, SequenceState) else list(x0)
    t = np.broadcast_to(np.asarray(t_ratio, dtype=np.float64), (len(states),)).copy()
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("t_ratio must lie in (0, 1]")
    L = len(states[0])
    hide = rng.random((len(states), L)) < t[:, None]
    skipped = 0
    for b in np.flatnonzero(~hide.any(axis=1)):
        hide[b] = rng.random(L) < t[b]
        skipped += int(not hide[b].any())
    ids = torch.tensor([s.ids for s in states], dtype=torch.long)
    loss = masked_lm_loss(model, ids, len(states[0].prompt), torch.from_numpy(hide),
                          torch.from_numpy(t), normalization)
    return MLMLoss(loss, int(hide.sum()), skipped)


def clone_model(model: DenoiserModel) -> DenoiserModel:
    twin = DenoiserModel(model.cfg)
    twin.load_state_dict(model.state_dict())
    return twin
