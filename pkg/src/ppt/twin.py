"""Digital twin components: DTM (next-state simulator) and DTC (TTE predictor).

Both twins consume windows encoded by :func:`encode_windows`: each row holds
the sample's standardized features, its normalized TTE and a mask bit. The
TTE of the window's last slot (the one being predicted) is always masked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .attention import AttentionConfig, Contextualizer, TransformerStack, check_finite
from .datagen import Dataset, window_indices
from .errors import ConfigurationError


@dataclass(frozen=True)
class ModelConfig:
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    n_features: int = 8
    gru_hidden: int = 0
    state_dim: int = 0
    bins: int = 10
    proj_dim: int = 32
    batch_size: int = 1
    window: int = 8
    learning_rate: float = 1e-3
    patience: int = 5
    min_delta: float = 1e-6
    max_epochs: int = 200
    grad_clip: float = 5.0

    def __post_init__(self):
        # 0 means "same as d_model" / "same as n_features"
        if self.gru_hidden == 0:
            object.__setattr__(self, "gru_hidden", self.attention.d_model)
        if self.state_dim == 0:
            object.__setattr__(self, "state_dim", self.n_features)
        if self.bins < 2:
            raise ConfigurationError(f"bins must be >= 2, got {self.bins}")
        if self.window < 2:
            raise ConfigurationError(f"window must be >= 2 (prompts mask two slots), got {self.window}")
        for name in ("n_features", "gru_hidden", "proj_dim", "batch_size", "patience", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.n_features + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = AttentionConfig(**d["attention"])
        return cls(**d)

    @classmethod
    def profile(cls, name: str, **overrides) -> "ModelConfig":
        """Named hyperparameter profiles: ``elevator``, ``ads`` and ``desk``.

        ``desk`` is the ADS profile with a two-layer transformer, mini-batches
        and a short epoch cap so that a full pipeline fits on a laptop CPU.
        """
        if name == "elevator":
            cfg = cls(AttentionConfig(16, 1, 128, 1), n_features=8, proj_dim=32, batch_size=1)
        elif name == "ads":
            cfg = cls(AttentionConfig(128, 32, 1024, 24), n_features=19, proj_dim=128, batch_size=1)
        elif name == "desk":
            cfg = cls(AttentionConfig(128, 32, 1024, 2), n_features=8, proj_dim=128,
                      batch_size=32, max_epochs=20)
        else:
            raise ConfigurationError(f"unknown model profile {name!r}")
        if "n_features" in overrides and "state_dim" not in overrides:
            overrides["state_dim"] = overrides["n_features"]
        return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------
# Discretization
# --------------------------------------------------------------------------

def _check_bounds(lo, hi) -> None:
    if np.any(np.asarray(hi, dtype=float) - np.asarray(lo, dtype=float) <= 0):
        raise ConfigurationError("state bounds need lo < hi in every dimension")


def discretize(x, lo, hi, bins: int):
    """Bin labels ``clamp(floor(bins*(x-lo)/(hi-lo)), 0, bins-1)``; tensors or arrays."""
    if torch.is_tensor(x):
        _check_bounds(lo.detach().cpu().numpy(), hi.detach().cpu().numpy())
        lab = torch.floor(bins * (x - lo) / (hi - lo))
        return lab.clamp(0, bins - 1).long()
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    _check_bounds(lo, hi)
    lab = np.floor(bins * (np.asarray(x, dtype=float) - lo) / (hi - lo))
    return np.clip(lab, 0, bins - 1).astype(np.int64)


def decode(labels, lo, hi, bins: int):
    """Bin midpoints for the given labels."""
    if torch.is_tensor(labels):
        return lo + (labels.to(lo.dtype) + 0.5) * (hi - lo) / bins
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return lo + (np.asarray(labels) + 0.5) * (hi - lo) / bins


# --------------------------------------------------------------------------
# Input encoding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TTENormalizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, *datasets: Dataset) -> "TTENormalizer":
        y = np.concatenate([d.tte for d in datasets])
        return cls(float(y.mean()), float(max(y.std(), 1e-6)))

    def normalize(self, y):
        return (y - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean


def encode_windows(d: Dataset, ends, omega: int, norm: TTENormalizer) -> np.ndarray:
    """Encode the windows ending at ``ends`` as ``(m, omega, F + 2)`` arrays.

    Channels are ``[features..., tte, mask]``. Padding rows are zero with the
    mask bit set; the final slot's TTE is masked in every window.
    """
    idx = window_indices(len(d), ends, omega)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    X = np.zeros(idx.shape + (d.F + 2,))
    X[..., : d.F] = np.where(valid[..., None], d.features[safe], 0.0)
    X[..., d.F] = np.where(valid, norm.normalize(d.tte[safe]), 0.0)
    X[..., d.F + 1] = (~valid).astype(float)
    X[:, -1, d.F] = 0.0
    X[:, -1, d.F + 1] = 1.0
    return X


def next_states(d: Dataset, ends) -> tuple[np.ndarray, np.ndarray]:
    """Features of each window's successor sample and a validity flag."""
    ends = np.asarray(ends, dtype=np.int64)
    nxt = ends + 1
    valid = nxt < len(d)
    return d.features[np.where(valid, nxt, 0)] * valid[:, None], valid


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

class GRU(nn.Module):
    """Gated recurrent unit with ``h_t = (1 - z_t) h_{t-1} + z_t * candidate``.

    The reset gate acts on the previous state *before* the recurrent matrix,
    ``candidate = tanh(W_h x + U_h (r * h) + b_h)``. Initial state is zero.
    """

    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.W = nn.Linear(d_in, 3 * hidden)
        self.U = nn.Linear(hidden, 3 * hidden, bias=False)

    def forward(self, x: torch.Tensor, return_gates: bool = False):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        H = self.hidden
        wx = self.W(x)
        U_zr_T, U_h_T = self.U.weight[:2 * H].T, self.U.weight[2 * H:].T
        h = x.new_zeros(x.shape[0], H)
        out, zs, rs = [], [], []
        for t in range(x.shape[1]):
            # z and r share one matmul
            z, r = torch.sigmoid(wx[:, t, :2 * H] + h @ U_zr_T).split(H, dim=-1)
            cand = torch.tanh(wx[:, t, 2 * H:] + (r * h) @ U_h_T)
            h = (1 - z) * h + z * cand
            out.append(h)
            zs.append(z)
            rs.append(r)
        seq = torch.stack(out, dim=1)
        if squeeze:
            seq = seq.squeeze(0)
        if return_gates:
            return seq, torch.stack(zs, dim=1), torch.stack(rs, dim=1)
        return seq


class CNNHead(nn.Module):
    """3x3 single-channel convolution over the (T, hidden) map, then a linear
    reshape to ``(S, bins)`` logits."""

    def __init__(self, T: int, hidden: int, S: int, bins: int):
        super().__init__()
        self.S, self.bins = S, bins
        self.conv = nn.Conv2d(1, 1, kernel_size=3, padding=1)
        self.linear = nn.Linear(T * hidden, S * bins)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        B = H.shape[0]
        c = self.conv(H.unsqueeze(1)).reshape(B, -1)
        return self.linear(c).reshape(B, self.S, self.bins)


class DtmOutput(NamedTuple):
    H: torch.Tensor  # GRU hidden sequence (B, T, gru_hidden)
    P: torch.Tensor  # label probabilities (B, S, bins)
    CU_M: torch.Tensor  # predicted next state, bin midpoints (B, S)


class DtcOutput(NamedTuple):
    H: torch.Tensor
    tau: torch.Tensor  # (B,) in normalized TTE units


class DTM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.bins = cfg.bins
        self.stack = TransformerStack(cfg.attention)
        self.gru = GRU(cfg.attention.d_model, cfg.gru_hidden)
        self.head = CNNHead(cfg.window, cfg.gru_hidden, cfg.state_dim, cfg.bins)
        # state bounds in standardized feature units; overwritten from training data
        self.register_buffer("lo", torch.full((cfg.state_dim,), -3.0))
        self.register_buffer("hi", torch.full((cfg.state_dim,), 3.0))

    def forward(self, CU: torch.Tensor) -> DtmOutput:
        H = self.gru(self.stack(CU))
        P = torch.softmax(self.head(H), dim=-1)
        check_finite(P, "DTM head")
        CU_M = decode(P.argmax(dim=-1), self.lo, self.hi, self.bins)
        return DtmOutput(H, P, CU_M.detach())


class DTC(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.attention.d_model
        self.fuse = nn.Linear(d + cfg.state_dim, d)
        self.stack = TransformerStack(cfg.attention)
        self.gru = GRU(d, cfg.gru_hidden)
        self.head = nn.Linear(cfg.gru_hidden, 1)

    def forward(self, CU: torch.Tensor, CU_M: torch.Tensor) -> DtcOutput:
        # argmax decoding is not differentiable, so the DTM prediction is an input only
        cm = CU_M.detach().unsqueeze(-2).expand(*CU.shape[:-1], CU_M.shape[-1])
        H = self.gru(self.stack(self.fuse(torch.cat([CU, cm], dim=-1))))
        tau = self.head(H[..., -1, :]).squeeze(-1)
        return DtcOutput(H, check_finite(tau, "DTC head"))


def dtm_aux_loss(P: torch.Tensor, next_state: torch.Tensor, lo: torch.Tensor, hi: torch.Tensor,
                 valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cross-entropy between ``P`` rows and the discretized next state."""
    if P.dim() == 2:
        P, next_state = P.unsqueeze(0), next_state.reshape(1, -1)
    labels = discretize(next_state, lo, hi, P.shape[-1])
    ce = -torch.log(P.gather(-1, labels.unsqueeze(-1)).squeeze(-1).clamp_min(1e-12)).mean(dim=-1)
    if valid is None:
        return ce.mean()
    w = valid.to(ce.dtype)
    return (ce * w).sum() / w.sum().clamp_min(1.0)


class TwinOutput(NamedTuple):
    CU: torch.Tensor
    dtm: DtmOutput
    dtc: DtcOutput


class DigitalTwin(nn.Module):
    """Contextualizer + DTM + DTC for one domain."""

    def __init__(self, cfg: ModelConfig, domain: str = "source"):
        super().__init__()
        if domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
        self.cfg = cfg
        self.domain = domain
        self.context = Contextualizer(cfg.input_dim, cfg.attention)
        self.dtm = DTM(cfg)
        self.dtc = DTC(cfg)
        self.register_buffer("tte_mean", torch.tensor(0.0))
        self.register_buffer("tte_std", torch.tensor(1.0))

    def set_normalization(self, lo, hi, norm: TTENormalizer) -> None:
        _check_bounds(lo, hi)
        self.dtm.lo.copy_(torch.as_tensor(np.asarray(lo), dtype=self.dtm.lo.dtype))
        self.dtm.hi.copy_(torch.as_tensor(np.asarray(hi), dtype=self.dtm.hi.dtype))
        self.tte_mean.fill_(norm.mean)
        self.tte_std.fill_(norm.std)

    @property
    def normalizer(self) -> TTENormalizer:
        return TTENormalizer(float(self.tte_mean), float(self.tte_std))

    def forward(self, X: torch.Tensor) -> TwinOutput:
        CU = self.context(X)
        m = self.dtm(CU)
        return TwinOutput(CU, m, self.dtc(CU, m.CU_M))

    @torch.no_grad()
    def predict_tte(self, d: Dataset, ends=None, batch: int = 256) -> np.ndarray:
        """TTE predictions in seconds for the windows ending at ``ends``."""
        ends = np.arange(len(d)) if ends is None else np.asarray(ends)
        dtype = self.tte_mean.dtype
        out = []
        for s in range(0, len(ends), batch):
            X = torch.as_tensor(encode_windows(d, ends[s:s + batch], self.cfg.window, self.normalizer), dtype=dtype)
            out.append(self(X).dtc.tau)
        tau = torch.cat(out) if out else torch.zeros(0, dtype=dtype)
        return self.normalizer.denormalize(tau.double().numpy())
