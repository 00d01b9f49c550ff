"""Multi-head self-attention blocks and the sample contextualizer.

The block follows the twin architecture exactly: attention output ``U_att``
is *not* added to the block input; the residual sums ``U_att`` with the
feed-forward output, ``CU = U_att + FFN(U_att)``. There is no layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 16
    n_heads: int = 1
    dim_feedforward: int = 128
    n_layers: int = 1

    def __post_init__(self):
        for name in ("d_model", "n_heads", "dim_feedforward", "n_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


def check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values after {stage}")
    return x


def sinusoidal_positions(positions: torch.Tensor, width: int) -> torch.Tensor:
    """Standard sin/cos position vectors: even columns sin, odd columns cos."""
    k = torch.arange(width, dtype=positions.dtype, device=positions.device)
    freq = torch.pow(10000.0, -(2 * torch.div(k, 2, rounding_mode="floor")) / width)
    angle = positions[..., None] * freq
    return torch.where(k % 2 == 0, torch.sin(angle), torch.cos(angle))


def positional_encode(U: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
    """Append a position vector of the input's own width to every row.

    ``U`` has shape ``(..., T, d_in)``; ``positions`` defaults to ``0..T-1``.
    """
    T = U.shape[-2]
    if T < 1:
        raise ValueError("sequence must have at least one row")
    if positions is None:
        positions = torch.arange(T, dtype=U.dtype, device=U.device)
    pe = sinusoidal_positions(positions.to(U.dtype), U.shape[-1])
    return torch.cat([U, pe.expand(*U.shape[:-1], U.shape[-1])], dim=-1)


class MHSABlock(nn.Module):
    """One attention + feed-forward block.

    ``dropout`` is zero for twin models; the Bayesian indicator sets it and
    keeps the module in training mode at inference.
    """

    def __init__(self, cfg: AttentionConfig, dropout: float = 0.0):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_k = d // cfg.n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.ffn_in = nn.Linear(d, cfg.dim_feedforward)
        self.ffn_out = nn.Linear(cfg.dim_feedforward, d)
        self.drop = nn.Dropout(dropout)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        *lead, T, _ = x.shape
        return x.reshape(*lead, T, self.n_heads, self.d_k).transpose(-3, -2)

    def attention(self, U: torch.Tensor) -> torch.Tensor:
        """Attention weights of shape ``(..., n_heads, T, T)``."""
        q, k = self._heads(self.q(U)), self._heads(self.k(U))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_k), dim=-1)

    def forward(self, U: torch.Tensor, return_attention: bool = False):
        A = check_finite(self.attention(U), "attention softmax")
        heads = A @ self._heads(self.v(U))
        *lead, _, T, _ = heads.shape
        U_att = self.out(heads.transpose(-3, -2).reshape(*lead, T, self.n_heads * self.d_k))
        U_att = check_finite(self.drop(U_att), "attention projection")
        U_ffn = self.ffn_out(torch.relu(self.ffn_in(U_att)))
        U_ffn = check_finite(self.drop(U_ffn), "feed-forward")
        out = U_att + U_ffn
        return (out, A) if return_attention else out


class TransformerStack(nn.Module):
    def __init__(self, cfg: AttentionConfig, dropout: float = 0.0):
        super().__init__()
        if cfg.n_layers < 1:
            raise ValueError("transformer stack needs at least one layer")
        self.blocks = nn.ModuleList(MHSABlock(cfg, dropout) for _ in range(cfg.n_layers))

    def forward(self, U: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            U = block(U)
        return U


class Contextualizer(nn.Module):
    """Positional encoding, input embedding and one attention block.

    Maps raw window rows of width ``d_in`` to contextualized rows ``CU`` of
    width ``d_model``.
    """

    def __init__(self, d_in: int, cfg: AttentionConfig, dropout: float = 0.0):
        super().__init__()
        self.embed = nn.Linear(2 * d_in, cfg.d_model)
        self.block = MHSABlock(cfg, dropout)

    def forward(self, U: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        return self.block(self.embed(positional_encode(U, positions)))
