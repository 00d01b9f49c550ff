"""Projection layers, marginal (KL) and conditional (linear MMD) alignment,
and the source/target model container with its checkpoint format."""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError
from .twin import DigitalTwin, ModelConfig, TTENormalizer, TwinOutput

CHECKPOINT_FORMAT = "ppt-checkpoint/1"
LOG_EPS = 1e-12


class Projection(nn.Module):
    """``tanh(W_P h + b_P)`` into a shared space."""

    def __init__(self, d_in: int, proj_dim: int):
        super().__init__()
        self.linear = nn.Linear(d_in, proj_dim)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        if H.shape[-1] != self.linear.in_features:
            raise ValueError(f"projection expects width {self.linear.in_features}, got {H.shape[-1]}")
        return torch.tanh(self.linear(H))


def project(H: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if H.shape[-1] != W.shape[1]:
        raise ValueError(f"projection expects width {W.shape[1]}, got {H.shape[-1]}")
    return torch.tanh(H @ W.T + b)


def marginal_loss(H_S: torch.Tensor, H_T: torch.Tensor) -> torch.Tensor:
    """KL(softmax(H_S[t]) || softmax(H_T[t])) averaged over timesteps.

    Leading batch dimensions are averaged as well.
    """
    if H_S.shape != H_T.shape:
        raise ValueError(f"shape mismatch {tuple(H_S.shape)} vs {tuple(H_T.shape)}")
    p = torch.softmax(H_S, dim=-1)
    q = torch.softmax(H_T, dim=-1)
    kl = (p * torch.log(p.clamp_min(LOG_EPS) / q.clamp_min(LOG_EPS))).sum(dim=-1)
    return kl.mean()


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    # sqrt has an infinite slope at 0; route the zero case through a constant
    sq = (v * v).sum(dim=-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def conditional_loss(P_S: torch.Tensor, P_T: torch.Tensor) -> torch.Tensor:
    """Linear-kernel MMD: the norm of the difference of row means."""
    if P_S.shape[0] == 0 or P_T.shape[0] == 0:
        raise ValueError("conditional loss needs non-empty batches")
    if P_S.shape[-1] != P_T.shape[-1]:
        raise ValueError("conditional loss needs equal widths")
    return _safe_norm(P_S.mean(dim=0) - P_T.mean(dim=0))


class AlignmentHeads(nn.Module):
    """Unshared projections: four for the GRU outputs, two for DTM probabilities.

    Each target-side projection starts as a copy of its source-side partner.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        gh, pd = cfg.gru_hidden, cfg.proj_dim
        flat = cfg.state_dim * cfg.bins
        self.sm, self.sc, self.ps = Projection(gh, pd), Projection(gh, pd), Projection(flat, pd)
        self.tm, self.tc, self.pt = copy.deepcopy(self.sm), copy.deepcopy(self.sc), copy.deepcopy(self.ps)


def alignment_losses(s: TwinOutput, t: TwinOutput, heads: AlignmentHeads) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_mar, L_cond)`` between a source and a target twin pass of equal batch size."""
    l_mar = (marginal_loss(heads.sm(s.dtm.H), heads.tm(t.dtm.H))
             + marginal_loss(heads.sc(s.dtc.H), heads.tc(t.dtc.H)))
    l_cond = conditional_loss(heads.ps(s.dtm.P.flatten(-2)), heads.pt(t.dtm.P.flatten(-2)))
    return l_mar, l_cond


class TransferModel(nn.Module):
    """Source twin, target twin and the projections aligning them."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.sdt = DigitalTwin(cfg, "source")
        self.tdt = DigitalTwin(cfg, "target")
        self.heads = AlignmentHeads(cfg)

    def set_normalization(self, lo, hi, norm: TTENormalizer) -> None:
        self.sdt.set_normalization(lo, hi, norm)
        self.tdt.set_normalization(lo, hi, norm)


def save_checkpoint(model: TransferModel, path: str | Path, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }, Path(path))


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> TransferModel:
    """Rebuild a :class:`TransferModel`; rejects a checkpoint whose config differs from ``cfg``."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    stored = ModelConfig.from_dict(blob["config"])
    if cfg is not None and cfg != stored:
        diff = sorted(k for k, v in cfg.to_dict().items() if stored.to_dict()[k] != v)
        raise ConfigurationError(f"{path}: checkpoint config differs in {diff}")
    model = TransferModel(stored)
    dtype = next(iter(blob["state"].values())).dtype
    model.to(dtype)
    model.load_state_dict(blob["state"])
    return model


def state_bounds(*features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension min/max over training features, widened where degenerate."""
    x = np.concatenate(features, axis=0)
    lo, hi = x.min(axis=0), x.max(axis=0)
    flat = hi - lo < 1e-9
    return np.where(flat, lo - 0.5, lo), np.where(flat, hi + 0.5, hi)
